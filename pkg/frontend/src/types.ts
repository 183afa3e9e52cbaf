// Wire types mirroring the case service JSON contract, verbatim.

export type RouteMethod = "dense" | "sparse" | "keyword";

export interface CaseSummary {
  diagnosis: string;
  treatment: string;
  tumor_size_mm: number[];
  patient_age: number | null;
  patient_gender: string;
  reference_id: string;
}

export interface RankedResult {
  pmcid: string;
  similarity: number;
  distance: number;
  rank: number;
  method: RouteMethod;
  summary: CaseSummary;
}

export interface QueryResponse {
  results: RankedResult[];
  method: RouteMethod | null;
}

export interface CaseRecord {
  pmcid: string;
  patient_age: number | null;
  patient_gender: string;
  presenting_complaint: string;
  clinical_features: string;
  radiological_features: string;
  histopathological_features: string;
  tumor_location: string;
  diagnosis_raw: string;
  diagnosis_label: string;
  variant_raw: string;
  variant_label: string;
  tumor_size_mm: number[];
  treatment: string;
  outcome: string | null;
}

export interface ImageRecord {
  image_id: string;
  pmcid: string;
  modality: string;
  sub_labels: string[];
  caption: string;
  split_lineage: string | null;
  file_path: string;
}

export interface ErrorBody {
  code: string;
  message: string;
  path: string;
}

/** The ten structured query fields, in canonical template order. */
export const FORM_FIELDS = [
  "presenting_complaint",
  "clinical_features",
  "radiological_features",
  "histopathological_features",
  "tumor_location",
  "diagnosis",
  "tumor_size",
  "tumor_variant",
  "patient_age",
  "patient_gender",
] as const;

export type FormField = (typeof FORM_FIELDS)[number];

export const FIELD_LABELS: Record<FormField, string> = {
  presenting_complaint: "Presenting complaint",
  clinical_features: "Clinical features",
  radiological_features: "Radiological features",
  histopathological_features: "Histopathological features",
  tumor_location: "Tumor location",
  diagnosis: "Diagnosis",
  tumor_size: "Tumor size",
  tumor_variant: "Tumor variant",
  patient_age: "Patient age",
  patient_gender: "Patient gender",
};
