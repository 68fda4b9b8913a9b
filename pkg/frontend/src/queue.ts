import type { CaseView, FieldComparisonRow, ReviewQueueItem } from "./types.js";

/** Cross-site pseudonyms are 11 characters over this alphabet (10 payload
 * characters plus a check character). The console must never show one. */
const PSEUDONYM_PATTERN = /\b[0-9ABCDEFGHJKMNPQRSTVWXYZ]{11}\b/;

/** Keys the API contract reserves for the backend. If one ever shows up in
 * a case payload the response is treated as malformed rather than shown. */
const FORBIDDEN_KEYS = ["internalId", "involvedEntries", "dizPseudonym", "crossSitePseudonym"];

export class MalformedCaseError extends Error {}

function assertClean(view: CaseView): void {
  for (const key of FORBIDDEN_KEYS) {
    if (key in (view as unknown as Record<string, unknown>)) {
      throw new MalformedCaseError(`case ${view.caseId} leaks field '${key}'`);
    }
  }
  for (const row of view.fieldComparison ?? []) {
    for (const value of [row.a, row.b]) {
      if (typeof value === "string" && PSEUDONYM_PATTERN.test(value)) {
        throw new MalformedCaseError(`case ${view.caseId} leaks a pseudonym in '${row.field}'`);
      }
    }
  }
}

/** Project a raw case onto what the reviewer is allowed to see. Only
 * whitelisted fields are copied; per-site identity blobs stay behind. */
export function toQueueItem(view: CaseView): ReviewQueueItem {
  assertClean(view);
  return {
    caseId: view.caseId,
    status: view.status,
    resolvable: view.resolvable,
    version: view.version,
    submittedAt: view.submittedAt,
    siteCount: view.involvedSites.length,
    fields: view.fieldComparison ?? [],
  };
}

/** "ACTIVE" is a client-side view over everything still awaiting a verdict. */
export function filterQueue(items: ReviewQueueItem[], status?: string): ReviewQueueItem[] {
  const keep = (i: ReviewQueueItem) =>
    status === undefined
      ? true
      : status === "ACTIVE"
        ? i.status === "OPEN" || i.status === "AWAITING_PLAINTEXT"
        : i.status === status;
  return items.filter(keep).sort((a, b) => a.submittedAt - b.submittedAt);
}

export type SimilarityClass = "agree" | "partial" | "disagree" | "unknown";

/** Bucket a per-field similarity for highlighting. Thresholds are display
 * concerns only; the score itself comes from the server. */
export function similarityClass(row: FieldComparisonRow): SimilarityClass {
  if (row.similarity === null) return "unknown";
  if (row.similarity >= 0.999) return "agree";
  if (row.similarity >= 0.6) return "partial";
  return "disagree";
}

export const FIELD_LABELS: Record<string, { de: string; en: string }> = {
  firstName: { de: "Vorname", en: "First name" },
  lastName: { de: "Nachname", en: "Last name" },
  birthDate: { de: "Geburtsdatum", en: "Date of birth" },
  sex: { de: "Geschlecht", en: "Sex" },
  postalCode: { de: "PLZ", en: "Postal code" },
  city: { de: "Ort", en: "City" },
};

export function fieldLabel(field: string, language: "de" | "en"): string {
  return FIELD_LABELS[field]?.[language] ?? field;
}
