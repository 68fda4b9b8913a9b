import type { ApiError, AuditEntry, CaseView, Settings } from "./types.js";

const MEDIA_TYPE = "application/vnd.linkwerk.v1+json";

export class ApiFailure extends Error {
  constructor(public readonly error: ApiError) {
    super(`${error.code}: ${error.detail}`);
  }
}

async function toFailure(response: Response): Promise<ApiFailure> {
  let code = "HTTP_" + response.status;
  let detail = response.statusText;
  try {
    const body = await response.json();
    if (typeof body.code === "string") code = body.code;
    if (typeof body.detail === "string") detail = body.detail;
  } catch {
    // non-JSON error body; keep the status text
  }
  return new ApiFailure({ status: response.status, code, detail });
}

/** Thin fetch wrapper around the clearing endpoints. */
export class ApiClient {
  constructor(
    private readonly settings: Settings,
    private readonly fetchImpl: typeof fetch = fetch,
  ) {}

  private async request(method: string, path: string, body?: unknown): Promise<unknown> {
    const response = await this.fetchImpl(this.settings.apiBaseUrl + path, {
      method,
      headers: {
        "X-Api-Key": this.settings.apiKey,
        Accept: MEDIA_TYPE,
        ...(body !== undefined ? { "Content-Type": "application/json" } : {}),
      },
      body: body !== undefined ? JSON.stringify(body) : undefined,
    });
    if (!response.ok) throw await toFailure(response);
    return response.json();
  }

  async listCases(status?: string): Promise<CaseView[]> {
    const query = status ? `?status=${encodeURIComponent(status)}` : "";
    const data = (await this.request("GET", "/v1/clearing/cases" + query)) as {
      cases: CaseView[];
    };
    return data.cases;
  }

  async requestPlaintext(caseId: string): Promise<CaseView> {
    return (await this.request(
      "POST",
      `/v1/clearing/cases/${encodeURIComponent(caseId)}/plaintext-request`,
    )) as CaseView;
  }

  async submitResolution(
    caseId: string,
    decision: "MERGE" | "SEPARATE",
    expectedVersion: number,
  ): Promise<{ caseId: string; status: string }> {
    return (await this.request(
      "POST",
      `/v1/clearing/cases/${encodeURIComponent(caseId)}/resolution`,
      { verdict: decision, expectedVersion },
    )) as { caseId: string; status: string };
  }

  async audit(since = 0): Promise<AuditEntry[]> {
    const data = (await this.request("GET", `/v1/audit?since=${since}`)) as {
      entries: AuditEntry[];
    };
    return data.entries;
  }
}
