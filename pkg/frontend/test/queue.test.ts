import { describe, expect, it } from "vitest";

import {
  MalformedCaseError,
  fieldLabel,
  filterQueue,
  similarityClass,
  toQueueItem,
} from "../src/queue.js";
import type { CaseView } from "../src/types.js";

function caseView(over: Partial<CaseView> = {}): CaseView {
  return {
    caseId: "C1",
    status: "OPEN",
    involvedSites: ["siteA", "siteB"],
    provided: [],
    resolvable: false,
    version: 3,
    submittedAt: 40,
    ...over,
  };
}

describe("toQueueItem", () => {
  it("keeps only reviewer-facing fields", () => {
    const item = toQueueItem(
      caseView({
        identities: { siteA: { firstName: "HANS" } },
        fieldComparison: [{ field: "lastName", a: "MAIER", b: "MAYER", similarity: 0.8 }],
      }),
    );
    expect(item).toEqual({
      caseId: "C1",
      status: "OPEN",
      resolvable: false,
      version: 3,
      submittedAt: 40,
      siteCount: 2,
      fields: [{ field: "lastName", a: "MAIER", b: "MAYER", similarity: 0.8 }],
    });
    expect("identities" in item).toBe(false);
  });

  it("rejects payloads carrying backend-internal keys", () => {
    const leaky = { ...caseView(), internalId: 7 } as unknown as CaseView;
    expect(() => toQueueItem(leaky)).toThrow(MalformedCaseError);
  });

  it("rejects pseudonym-shaped field values", () => {
    const view = caseView({
      fieldComparison: [{ field: "lastName", a: "0A1B2C3D4E5", b: "MAIER", similarity: 0.1 }],
    });
    expect(() => toQueueItem(view)).toThrow(MalformedCaseError);
  });

  it("accepts ordinary names and dates", () => {
    const view = caseView({
      fieldComparison: [
        { field: "firstName", a: "HANS", b: "HANS", similarity: 1 },
        { field: "birthDate", a: "1980-05-02", b: "1980-05-02", similarity: 1 },
      ],
    });
    expect(toQueueItem(view).fields).toHaveLength(2);
  });
});

describe("filterQueue", () => {
  const items = [
    toQueueItem(caseView({ caseId: "C2", submittedAt: 9 })),
    toQueueItem(caseView({ caseId: "C3", status: "RESOLVED_MERGE", submittedAt: 5 })),
    toQueueItem(caseView({ caseId: "C1", submittedAt: 2 })),
  ];

  it("filters by status and orders by submission time", () => {
    expect(filterQueue(items, "OPEN").map((i) => i.caseId)).toEqual(["C1", "C2"]);
  });

  it("returns everything when no filter is set", () => {
    expect(filterQueue(items)).toHaveLength(3);
  });

  it("keeps awaiting-plaintext cases in the active view", () => {
    const awaiting = toQueueItem(
      caseView({ caseId: "C4", status: "AWAITING_PLAINTEXT", submittedAt: 1 }),
    );
    const active = filterQueue([...items, awaiting], "ACTIVE");
    expect(active.map((i) => i.caseId)).toEqual(["C4", "C1", "C2"]);
  });
});

describe("similarityClass", () => {
  it.each([
    [1.0, "agree"],
    [0.8, "partial"],
    [0.2, "disagree"],
    [null, "unknown"],
  ] as const)("similarity %s -> %s", (similarity, expected) => {
    expect(similarityClass({ field: "x", a: "a", b: "b", similarity })).toBe(expected);
  });
});

describe("fieldLabel", () => {
  it("translates known fields and passes unknown ones through", () => {
    expect(fieldLabel("birthDate", "de")).toBe("Geburtsdatum");
    expect(fieldLabel("birthDate", "en")).toBe("Date of birth");
    expect(fieldLabel("shoeSize", "en")).toBe("shoeSize");
  });
});
