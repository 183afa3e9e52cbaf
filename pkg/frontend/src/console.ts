// Console state machine: query panel plus the validation/curation panel.
// Holds no derived numbers of its own; results and post-states always come
// from the service response.

import { ApiClient, ApiError } from "./api.js";
import type { QueryRequest } from "./api.js";
import {
  renderBanner,
  renderCaseEditor,
  renderCaseList,
  renderImageGrid,
  renderResults,
  renderStructuredForm,
} from "./render.js";
import type { CaseRecord, ImageRecord, QueryResponse } from "./types.js";
import { FORM_FIELDS, type FormField } from "./types.js";

export type QueryMode = "free_text" | "structured_form";

interface Banner {
  kind: "error" | "rebuilding" | "notice";
  message: string;
  retry: boolean;
}

interface QueryPanelState {
  mode: QueryMode;
  text: string;
  form: Record<FormField, string>;
  k: number;
  busy: boolean;
  banner: Banner | null;
  response: QueryResponse | null;
}

interface ValidationPanelState {
  pmcidInput: string;
  record: CaseRecord | null; // the edit buffer (starts as the server record)
  images: ImageRecord[];
  fieldErrors: Record<string, string>;
  banner: Banner | null;
  pendingDelete: string | null; // pmcid or image id awaiting confirmation
  caseList: string[];
  total: number;
}

function emptyForm(): Record<FormField, string> {
  return Object.fromEntries(FORM_FIELDS.map((f) => [f, ""])) as Record<FormField, string>;
}

export function parseSizesMm(raw: string): number[] {
  return raw
    .split(/[x×*,]|by/i)
    .map((part) => Number.parseFloat(part.trim()))
    .filter((v) => Number.isFinite(v));
}

/** Map the ten form fields onto the partial case record the service expects. */
export function formToRecord(form: Record<FormField, string>): Partial<CaseRecord> {
  const out: Partial<CaseRecord> = { pmcid: "PMC0" };
  if (form.presenting_complaint) out.presenting_complaint = form.presenting_complaint;
  if (form.clinical_features) out.clinical_features = form.clinical_features;
  if (form.radiological_features) out.radiological_features = form.radiological_features;
  if (form.histopathological_features) out.histopathological_features = form.histopathological_features;
  if (form.tumor_location) out.tumor_location = form.tumor_location;
  if (form.diagnosis) out.diagnosis_raw = form.diagnosis;
  if (form.tumor_variant) out.variant_raw = form.tumor_variant;
  if (form.tumor_size) out.tumor_size_mm = parseSizesMm(form.tumor_size);
  if (form.patient_age) {
    const age = Number.parseInt(form.patient_age, 10);
    if (Number.isFinite(age)) out.patient_age = age;
  }
  if (form.patient_gender) {
    const gender = form.patient_gender.trim().toLowerCase();
    if (["male", "female", "other", "unknown"].includes(gender)) out.patient_gender = gender;
  }
  return out;
}

export class ConsoleController {
  query: QueryPanelState = {
    mode: "free_text",
    text: "",
    form: emptyForm(),
    k: 5,
    busy: false,
    banner: null,
    response: null,
  };

  validation: ValidationPanelState = {
    pmcidInput: "",
    record: null,
    images: [],
    fieldErrors: {},
    banner: null,
    pendingDelete: null,
    caseList: [],
    total: 0,
  };

  constructor(private api: ApiClient) {}

  // -- query panel -----------------------------------------------------------

  setMode(mode: QueryMode): void {
    this.query.mode = mode;
  }

  setText(text: string): void {
    this.query.text = text;
  }

  setFormField(field: FormField, value: string): void {
    this.query.form[field] = value;
  }

  setK(k: number): void {
    this.query.k = Math.max(1, Math.floor(k));
  }

  canSubmit(): boolean {
    if (this.query.busy) return false;
    if (this.query.mode === "free_text") return this.query.text.trim().length > 0;
    return FORM_FIELDS.some((f) => this.query.form[f].trim().length > 0);
  }

  buildRequest(): QueryRequest {
    if (this.query.mode === "free_text") {
      return { mode: "free_text", text: this.query.text, k: this.query.k };
    }
    return { mode: "structured_form", form: formToRecord(this.query.form), k: this.query.k };
  }

  async submitQuery(): Promise<void> {
    if (!this.canSubmit()) return;
    this.query.busy = true;
    this.query.banner = null;
    try {
      this.query.response = await this.api.query(this.buildRequest());
    } catch (err) {
      this.query.response = null;
      this.query.banner = this.toBanner(err);
    } finally {
      this.query.busy = false;
    }
  }

  renderQueryResults(): string {
    if (this.query.banner) {
      const b = this.query.banner;
      return renderBanner(b.kind, b.message, b.retry);
    }
    if (!this.query.response) return "";
    return renderResults(this.query.response.results, this.query.response.method);
  }

  renderForm(): string {
    return renderStructuredForm(this.query.form);
  }

  // -- validation panel -------------------------------------------------------

  setPmcidInput(pmcid: string): void {
    this.validation.pmcidInput = pmcid;
  }

  get editsEnabled(): boolean {
    return this.validation.record !== null;
  }

  async refreshCaseList(): Promise<void> {
    const page = await this.api.listCases(0, 200);
    this.validation.caseList = page.cases.map((c) => c.pmcid);
    this.validation.total = page.total;
  }

  async loadCase(pmcid?: string): Promise<void> {
    const id = (pmcid ?? this.validation.pmcidInput).trim();
    if (!id) return;
    this.validation.banner = null;
    this.validation.fieldErrors = {};
    this.validation.pendingDelete = null;
    try {
      const [record, images] = await Promise.all([
        this.api.getCase(id),
        this.api.imagesFor(id),
      ]);
      this.validation.record = record;
      this.validation.images = images.images;
    } catch (err) {
      this.validation.record = null;
      this.validation.images = [];
      if (err instanceof ApiError && err.status === 404) {
        this.validation.banner = { kind: "error", message: `Unknown PMCID: ${id}`, retry: false };
      } else {
        this.validation.banner = this.toBanner(err);
      }
    }
  }

  setCaseField(field: string, value: string): void {
    if (!this.validation.record) return;
    const record = { ...this.validation.record } as Record<string, unknown>;
    if (field === "tumor_size_mm") {
      record[field] = parseSizesMm(value);
    } else if (field === "patient_age") {
      const age = Number.parseInt(value, 10);
      record[field] = Number.isFinite(age) ? age : null;
    } else {
      record[field] = value;
    }
    this.validation.record = record as unknown as CaseRecord;
  }

  async saveCase(): Promise<void> {
    if (!this.validation.record) return;
    this.validation.fieldErrors = {};
    this.validation.banner = null;
    try {
      // the server's response is the authoritative post-state
      this.validation.record = await this.api.saveCase(this.validation.record);
      this.validation.banner = { kind: "notice", message: "Saved.", retry: false };
    } catch (err) {
      if (err instanceof ApiError && err.status === 400) {
        const field = err.body.path.split("[")[0].split(".")[0];
        this.validation.fieldErrors[field] = err.body.message;
      } else if (err instanceof ApiError && err.status === 409) {
        this.validation.banner = {
          kind: "error",
          message: "Edit conflict: reload the case and retry.",
          retry: true,
        };
      } else {
        this.validation.banner = this.toBanner(err);
      }
    }
  }

  requestDeleteCase(): void {
    if (this.validation.record) {
      this.validation.pendingDelete = this.validation.record.pmcid;
    }
  }

  requestDeleteImage(imageId: string): void {
    this.validation.pendingDelete = imageId;
  }

  cancelDelete(): void {
    this.validation.pendingDelete = null;
  }

  async confirmDelete(): Promise<void> {
    const target = this.validation.pendingDelete;
    if (!target) return;
    this.validation.pendingDelete = null;
    try {
      if (this.validation.record && target === this.validation.record.pmcid) {
        await this.api.deleteCase(target);
        this.validation.record = null;
        this.validation.images = [];
        this.validation.banner = { kind: "notice", message: `Deleted ${target}.`, retry: false };
      } else {
        await this.api.deleteImage(target);
        if (this.validation.record) {
          const refreshed = await this.api.imagesFor(this.validation.record.pmcid);
          this.validation.images = refreshed.images;
        }
      }
      await this.refreshCaseList();
    } catch (err) {
      this.validation.banner = this.toBanner(err);
    }
  }

  renderValidationPanel(): string {
    const parts: string[] = [];
    if (this.validation.banner) {
      const b = this.validation.banner;
      parts.push(renderBanner(b.kind, b.message, b.retry));
    }
    if (this.validation.record) {
      if (this.validation.pendingDelete) {
        parts.push(
          `<div class="confirm-delete">Delete ${this.validation.pendingDelete}? ` +
            `<button data-action="confirm-delete">Confirm</button>` +
            `<button data-action="cancel-delete">Cancel</button></div>`,
        );
      }
      parts.push(renderCaseEditor(this.validation.record, this.validation.fieldErrors));
      parts.push(renderImageGrid(this.validation.images));
    }
    return parts.join("\n");
  }

  renderCaseListPanel(): string {
    return renderCaseList(this.validation.caseList, this.validation.total);
  }

  // ---------------------------------------------------------------------------

  private toBanner(err: unknown): Banner {
    if (err instanceof ApiError && err.status === 503) {
      return { kind: "rebuilding", message: "Index rebuilding, try again shortly.", retry: true };
    }
    if (err instanceof ApiError) {
      return { kind: "error", message: `${err.body.code}: ${err.body.message}`, retry: true };
    }
    return { kind: "error", message: `Network error: ${String(err)}`, retry: true };
  }
}
