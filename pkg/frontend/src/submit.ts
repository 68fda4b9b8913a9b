import { ApiFailure } from "./api.js";
import type { Verdict } from "./types.js";

export interface ResolutionApi {
  submitResolution(
    caseId: string,
    decision: "MERGE" | "SEPARATE",
    expectedVersion: number,
  ): Promise<{ caseId: string; status: string }>;
}

export type SubmitOutcome =
  | { kind: "accepted"; status: string }
  | { kind: "conflict"; detail: string }
  | { kind: "duplicate" }
  | { kind: "failed"; detail: string };

/** Serializes verdict submission per case. A second click while a request
 * is in flight, or after a verdict was accepted, becomes a no-op instead of
 * a second POST; a version conflict triggers a reload so the actor sees the
 * case as it now is. */
export class VerdictController {
  private inFlight = new Set<string>();
  private accepted = new Set<string>();
  /** Chronological record of what the controller actually did. */
  readonly log: { caseId: string; event: string }[] = [];

  constructor(
    private readonly api: ResolutionApi,
    private readonly onConflict: (caseId: string) => Promise<void>,
  ) {}

  async submit(verdict: Verdict, expectedVersion: number): Promise<SubmitOutcome> {
    if (this.accepted.has(verdict.caseId) || this.inFlight.has(verdict.caseId)) {
      this.log.push({ caseId: verdict.caseId, event: "suppressed_duplicate" });
      return { kind: "duplicate" };
    }
    this.inFlight.add(verdict.caseId);
    this.log.push({ caseId: verdict.caseId, event: "posted" });
    try {
      const result = await this.api.submitResolution(
        verdict.caseId,
        verdict.decision,
        expectedVersion,
      );
      this.accepted.add(verdict.caseId);
      this.log.push({ caseId: verdict.caseId, event: "accepted" });
      return { kind: "accepted", status: result.status };
    } catch (err) {
      if (err instanceof ApiFailure && err.error.status === 409) {
        this.log.push({ caseId: verdict.caseId, event: "conflict" });
        await this.onConflict(verdict.caseId);
        return { kind: "conflict", detail: err.error.detail };
      }
      this.log.push({ caseId: verdict.caseId, event: "failed" });
      const detail = err instanceof ApiFailure ? err.error.detail : String(err);
      return { kind: "failed", detail };
    } finally {
      this.inFlight.delete(verdict.caseId);
    }
  }
}
