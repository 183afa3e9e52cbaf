// Thin typed client over the case service HTTP+JSON contract.
// All persistence and all similarity math live on the server; this client
// only moves JSON.

import type {
  CaseRecord,
  ErrorBody,
  ImageRecord,
  QueryResponse,
} from "./types.js";

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(
    public status: number,
    public body: ErrorBody,
  ) {
    super(body.message);
  }
}

async function asApiError(response: Response): Promise<ApiError> {
  let body: ErrorBody = { code: "unknown", message: response.statusText, path: "" };
  try {
    body = (await response.json()) as ErrorBody;
  } catch {
    // non-JSON error body: keep the status text
  }
  return new ApiError(response.status, body);
}

export interface QueryRequest {
  mode: "free_text" | "structured_form";
  text?: string;
  form?: Partial<CaseRecord>;
  k: number;
}

export class ApiClient {
  constructor(
    private baseUrl: string,
    private fetchImpl: FetchLike = fetch.bind(globalThis),
  ) {}

  private async request<T>(method: string, path: string, payload?: unknown): Promise<T> {
    const response = await this.fetchImpl(`${this.baseUrl}${path}`, {
      method,
      headers: payload === undefined ? undefined : { "Content-Type": "application/json" },
      body: payload === undefined ? undefined : JSON.stringify(payload),
    });
    if (!response.ok) {
      throw await asApiError(response);
    }
    return (await response.json()) as T;
  }

  health(): Promise<{ status: string; cases: number }> {
    return this.request("GET", "/health");
  }

  query(request: QueryRequest): Promise<QueryResponse> {
    return this.request("POST", "/query", request);
  }

  listCases(offset = 0, limit = 50): Promise<{ total: number; cases: CaseRecord[] }> {
    return this.request("GET", `/cases?offset=${offset}&limit=${limit}`);
  }

  getCase(pmcid: string): Promise<CaseRecord> {
    return this.request("GET", `/cases/${encodeURIComponent(pmcid)}`);
  }

  saveCase(record: CaseRecord): Promise<CaseRecord> {
    return this.request("PUT", `/cases/${encodeURIComponent(record.pmcid)}`, record);
  }

  deleteCase(pmcid: string): Promise<{ deleted: string }> {
    return this.request("DELETE", `/cases/${encodeURIComponent(pmcid)}`);
  }

  imagesFor(pmcid: string): Promise<{ images: ImageRecord[] }> {
    return this.request("GET", `/cases/${encodeURIComponent(pmcid)}/images`);
  }

  uploadImage(image: Partial<ImageRecord> & { blob_base64?: string }): Promise<ImageRecord> {
    return this.request("POST", "/images", image);
  }

  saveImage(image: ImageRecord): Promise<ImageRecord> {
    return this.request("PUT", `/images/${encodeURIComponent(image.image_id)}`, image);
  }

  deleteImage(imageId: string): Promise<{ deleted: string }> {
    return this.request("DELETE", `/images/${encodeURIComponent(imageId)}`);
  }
}
