/** Shared types for the clearing console. Everything here mirrors the HTTP
 * API contract; the console has no other coupling to the backend. */

export interface Settings {
  /** Base URL of the linkage service, e.g. "http://127.0.0.1:8423". */
  apiBaseUrl: string;
  /** API key of a clearing actor principal. */
  apiKey: string;
  /** UI language for field labels. */
  language?: "de" | "en";
}

export type CaseStatus =
  | "OPEN"
  | "AWAITING_PLAINTEXT"
  | "RESOLVED_MERGE"
  | "RESOLVED_SEPARATE"
  | "VOID";

export interface FieldComparisonRow {
  field: string;
  a: string | null;
  b: string | null;
  /** 0..1 similarity from the server-side score breakdown; null when a
   * value is missing on either side. */
  similarity: number | null;
}

/** Raw case representation as returned by GET /v1/clearing/cases. */
export interface CaseView {
  caseId: string;
  status: CaseStatus;
  involvedSites: string[];
  provided: string[];
  resolvable: boolean;
  version: number;
  submittedAt: number;
  identities?: Record<string, Record<string, unknown>>;
  fieldComparison?: FieldComparisonRow[];
}

/** What the queue actually shows. Derived from CaseView with everything
 * the reviewer must not see stripped out. */
export interface ReviewQueueItem {
  caseId: string;
  status: CaseStatus;
  resolvable: boolean;
  version: number;
  submittedAt: number;
  siteCount: number;
  fields: FieldComparisonRow[];
}

export interface Verdict {
  caseId: string;
  decision: "MERGE" | "SEPARATE";
  note?: string;
}

export interface AuditEntry {
  auditSeq: number;
  action: string;
  details: Record<string, unknown>;
  source: string;
}

export interface ApiError {
  status: number;
  code: string;
  detail: string;
}
