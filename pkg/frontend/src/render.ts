// Pure HTML-string renderers. No similarity math happens here: every number
// shown is a formatted copy of a value the service returned.

import type { CaseRecord, ImageRecord, RankedResult } from "./types.js";
import { FIELD_LABELS, FORM_FIELDS } from "./types.js";

export function escapeHtml(raw: string): string {
  return raw
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;")
    .replace(/'/g, "&#39;");
}

/** Format a server-provided similarity to two decimals; values must already
 * sit in [0, 1] (a violation means a broken server, not a rendering job). */
export function formatSimilarity(similarity: number): string {
  if (!(similarity >= 0 && similarity <= 1)) {
    throw new RangeError(`similarity out of [0, 1]: ${similarity}`);
  }
  return similarity.toFixed(2);
}

export function formatTumorSize(sizes: number[]): string {
  if (!sizes.length) return "unknown";
  return sizes.map((v) => `${v} mm`).join(" x ");
}

export function formatDemographics(age: number | null, gender: string): string {
  const agePart = age === null ? "age unknown" : `${age}-year-old`;
  return `${agePart} ${gender || "unknown"}`;
}

export function renderResultCard(result: RankedResult): string {
  const s = result.summary;
  return `<article class="result-card" data-pmcid="${escapeHtml(result.pmcid)}" data-rank="${result.rank}">
  <header>
    <span class="rank">#${result.rank}</span>
    <span class="similarity">Similarity score: ${formatSimilarity(result.similarity)}</span>
    <span class="method-badge method-${escapeHtml(result.method)}">${escapeHtml(result.method)}</span>
  </header>
  <dl>
    <dt>Diagnosis</dt><dd>${escapeHtml(s.diagnosis || "unknown")}</dd>
    <dt>Treatment</dt><dd>${escapeHtml(s.treatment || "unknown")}</dd>
    <dt>Tumor size</dt><dd>${escapeHtml(formatTumorSize(s.tumor_size_mm))}</dd>
    <dt>Patient demographics</dt><dd>${escapeHtml(formatDemographics(s.patient_age, s.patient_gender))}</dd>
    <dt>Reference ID</dt><dd class="reference-id">${escapeHtml(s.reference_id)}</dd>
  </dl>
</article>`;
}

export function renderResults(results: RankedResult[], method: string | null): string {
  if (!results.length) {
    return `<p class="empty-results">No similar cases found.</p>`;
  }
  const ordered = [...results].sort((a, b) => a.rank - b.rank);
  const badge = method ? `<p class="route-note">Routed via <strong>${escapeHtml(method)}</strong>.</p>` : "";
  return badge + ordered.map(renderResultCard).join("\n");
}

export function renderBanner(kind: "error" | "rebuilding" | "notice", message: string, retry = false): string {
  const button = retry ? `<button class="retry" data-action="retry">Retry</button>` : "";
  return `<div class="banner banner-${kind}" role="alert">${escapeHtml(message)}${button}</div>`;
}

export function renderStructuredForm(values: Record<string, string>): string {
  const rows = FORM_FIELDS.map((field) => {
    const value = values[field] ?? "";
    return `<label class="form-row">
  <span>${escapeHtml(FIELD_LABELS[field])}</span>
  <input name="${field}" value="${escapeHtml(value)}" data-field="${field}">
</label>`;
  });
  return rows.join("\n");
}

// ---------------------------------------------------------------------------
// Validation panel
// ---------------------------------------------------------------------------

const EDITABLE_FIELDS: (keyof CaseRecord)[] = [
  "presenting_complaint",
  "clinical_features",
  "radiological_features",
  "histopathological_features",
  "tumor_location",
  "diagnosis_raw",
  "variant_raw",
  "treatment",
  "outcome",
];

export function renderCaseEditor(
  record: CaseRecord,
  fieldErrors: Record<string, string>,
): string {
  const rows = EDITABLE_FIELDS.map((field) => {
    const error = fieldErrors[field]
      ? `<span class="field-error">${escapeHtml(fieldErrors[field])}</span>`
      : "";
    const value = (record[field] as string | null) ?? "";
    return `<label class="form-row">
  <span>${escapeHtml(field)}</span>
  <input name="${field}" value="${escapeHtml(value)}" data-case-field="${field}">
  ${error}
</label>`;
  });
  const sizeError = fieldErrors["tumor_size_mm"]
    ? `<span class="field-error">${escapeHtml(fieldErrors["tumor_size_mm"])}</span>`
    : "";
  rows.push(`<label class="form-row">
  <span>tumor_size_mm</span>
  <input name="tumor_size_mm" value="${escapeHtml(record.tumor_size_mm.join(" x "))}" data-case-field="tumor_size_mm">
  ${sizeError}
</label>`);
  return `<form class="case-editor" data-pmcid="${escapeHtml(record.pmcid)}">
${rows.join("\n")}
<div class="editor-actions">
  <button data-action="save" type="button">Save</button>
  <button data-action="delete" type="button" class="danger">Delete case</button>
</div>
</form>`;
}

export function renderImageGrid(images: ImageRecord[]): string {
  if (!images.length) {
    return `<p class="empty-images">No image metadata for this case.</p>`;
  }
  const cells = images.map(
    (img) => `<div class="image-cell" data-image-id="${escapeHtml(img.image_id)}">
  <span class="modality">${escapeHtml(img.modality)}</span>
  <span class="labels">${img.sub_labels.map(escapeHtml).join(", ")}</span>
  <span class="caption">${escapeHtml(img.caption)}</span>
  <button data-action="delete-image" data-image-id="${escapeHtml(img.image_id)}">Delete</button>
</div>`,
  );
  return `<div class="image-grid">${cells.join("\n")}</div>`;
}

export function renderCaseList(pmcids: string[], total: number): string {
  const items = pmcids
    .map((p) => `<li><button data-action="load-case" data-pmcid="${escapeHtml(p)}">${escapeHtml(p)}</button></li>`)
    .join("\n");
  return `<p class="case-count">${total} cases on record</p><ul class="case-list">${items}</ul>`;
}
