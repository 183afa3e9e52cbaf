// DOM glue: wires the controller to the static page. All rendering comes
// from the pure render functions; this file only moves strings and events.

import { ApiClient } from "./api.js";
import { ConsoleController } from "./console.js";
import type { FormField } from "./types.js";

const BASE_URL =
  new URLSearchParams(window.location.search).get("api") ?? "http://127.0.0.1:8040";

const api = new ApiClient(BASE_URL);
const controller = new ConsoleController(api);

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
};

const queryText = $<HTMLTextAreaElement>("query-text");
const kSelector = $<HTMLSelectElement>("k-selector");
const submitButton = $<HTMLButtonElement>("submit-query");
const resultsPanel = $("results-panel");
const formPanel = $("structured-form");
const modeToggle = $<HTMLSelectElement>("mode-toggle");
const validationPanel = $("validation-panel");
const caseListPanel = $("case-list");
const pmcidInput = $<HTMLInputElement>("pmcid-input");

function syncSubmit(): void {
  submitButton.disabled = !controller.canSubmit();
}

function paintResults(): void {
  resultsPanel.innerHTML = controller.renderQueryResults();
}

function paintValidation(): void {
  validationPanel.innerHTML = controller.renderValidationPanel();
}

function paintCaseList(): void {
  caseListPanel.innerHTML = controller.renderCaseListPanel();
}

modeToggle.addEventListener("change", () => {
  controller.setMode(modeToggle.value as "free_text" | "structured_form");
  queryText.parentElement!.hidden = controller.query.mode !== "free_text";
  formPanel.hidden = controller.query.mode !== "structured_form";
  syncSubmit();
});

queryText.addEventListener("input", () => {
  controller.setText(queryText.value);
  syncSubmit();
});

kSelector.addEventListener("change", () => controller.setK(Number(kSelector.value)));

formPanel.addEventListener("input", (event) => {
  const input = event.target as HTMLInputElement;
  const field = input.dataset.field as FormField | undefined;
  if (field) {
    controller.setFormField(field, input.value);
    syncSubmit();
  }
});

submitButton.addEventListener("click", async () => {
  submitButton.disabled = true;
  await controller.submitQuery();
  paintResults();
  syncSubmit();
});

resultsPanel.addEventListener("click", async (event) => {
  const target = event.target as HTMLElement;
  if (target.dataset.action === "retry") {
    await controller.submitQuery();
    paintResults();
  }
});

pmcidInput.addEventListener("input", () => controller.setPmcidInput(pmcidInput.value));

$("load-case").addEventListener("click", async () => {
  await controller.loadCase();
  paintValidation();
});

validationPanel.addEventListener("click", async (event) => {
  const target = event.target as HTMLElement;
  const action = target.dataset.action;
  if (!action) return;
  if (action === "save") {
    await controller.saveCase();
  } else if (action === "delete") {
    controller.requestDeleteCase();
  } else if (action === "delete-image" && target.dataset.imageId) {
    controller.requestDeleteImage(target.dataset.imageId);
  } else if (action === "confirm-delete") {
    await controller.confirmDelete();
    paintCaseList();
  } else if (action === "cancel-delete") {
    controller.cancelDelete();
  }
  paintValidation();
});

validationPanel.addEventListener("input", (event) => {
  const input = event.target as HTMLInputElement;
  const field = input.dataset.caseField;
  if (field) controller.setCaseField(field, input.value);
});

caseListPanel.addEventListener("click", async (event) => {
  const target = event.target as HTMLElement;
  if (target.dataset.action === "load-case" && target.dataset.pmcid) {
    await controller.loadCase(target.dataset.pmcid);
    paintValidation();
  }
});

formPanel.innerHTML = controller.renderForm();
formPanel.hidden = true;
syncSubmit();
void controller.refreshCaseList().then(paintCaseList);
