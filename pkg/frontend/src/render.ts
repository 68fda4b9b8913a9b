import { fieldLabel, similarityClass } from "./queue.js";
import type { AuditEntry, ReviewQueueItem } from "./types.js";

function esc(value: unknown): string {
  return String(value ?? "")
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function renderEmptyState(language: "de" | "en"): string {
  const text =
    language === "de"
      ? "Keine offenen Klärungsfälle."
      : "No clearing cases waiting for review.";
  return `<div class="empty-state">${text}</div>`;
}

export function renderRetryBanner(detail: string, language: "de" | "en"): string {
  const text =
    language === "de" ? "Dienst nicht erreichbar, erneut versuchen" : "Service unreachable, retry";
  return (
    `<div class="retry-banner" role="alert">` +
    `<span>${text}</span> <code>${esc(detail)}</code> ` +
    `<button data-action="retry">↻</button></div>`
  );
}

function renderFieldRows(item: ReviewQueueItem, language: "de" | "en"): string {
  return item.fields
    .map((row) => {
      const cls = similarityClass(row);
      const pct = row.similarity === null ? "–" : (row.similarity * 100).toFixed(0) + "%";
      return (
        `<tr class="field-${cls}" data-field="${esc(row.field)}">` +
        `<th>${esc(fieldLabel(row.field, language))}</th>` +
        `<td>${esc(row.a ?? "—")}</td><td>${esc(row.b ?? "—")}</td>` +
        `<td class="similarity">${pct}</td></tr>`
      );
    })
    .join("");
}

export function renderCaseCard(
  item: ReviewQueueItem,
  language: "de" | "en",
  selected: boolean,
): string {
  const actions = item.resolvable
    ? `<button data-action="merge" data-case="${esc(item.caseId)}">Merge (m)</button>` +
      `<button data-action="separate" data-case="${esc(item.caseId)}">Separate (s)</button>`
    : `<button data-action="request-plaintext" data-case="${esc(item.caseId)}">` +
      (language === "de" ? "IDAT anfordern" : "Request identity data") +
      `</button>`;
  const fields = item.fields.length
    ? `<table class="field-diff"><tbody>${renderFieldRows(item, language)}</tbody></table>`
    : `<p class="pending">${language === "de" ? "IDAT noch nicht vollständig" : "Identity data incomplete"} (${item.siteCount} sites)</p>`;
  return (
    `<article class="case${selected ? " selected" : ""}" data-case="${esc(item.caseId)}" tabindex="0">` +
    `<header><h2>${esc(item.caseId)}</h2>` +
    `<span class="status">${esc(item.status)}</span></header>` +
    fields +
    `<footer>${actions}</footer></article>`
  );
}

export function renderQueue(
  items: ReviewQueueItem[],
  language: "de" | "en",
  selectedIndex = 0,
): string {
  if (items.length === 0) return renderEmptyState(language);
  const note =
    language === "de"
      ? "Angezeigt werden ausschließlich identifizierende Stammdaten und Ähnlichkeitswerte; medizinische Angaben sind nicht Teil der Klärung."
      : "Only identifying master data and similarity scores are shown; medical context is not part of clearing.";
  return (
    `<p class="scope-note">${note}</p>` +
    items.map((item, i) => renderCaseCard(item, language, i === selectedIndex)).join("")
  );
}

export function renderAudit(entries: AuditEntry[], language: "de" | "en"): string {
  if (entries.length === 0) {
    return `<div class="empty-state">${language === "de" ? "Keine Einträge" : "No entries"}</div>`;
  }
  const rows = entries
    .map((e) => {
      const caseId = typeof e.details["caseId"] === "string" ? e.details["caseId"] : "";
      const verdict = typeof e.details["verdict"] === "string" ? e.details["verdict"] : "";
      return (
        `<tr><td>${e.auditSeq}</td><td>${esc(e.action)}</td>` +
        `<td>${esc(caseId)}</td><td>${esc(verdict)}</td></tr>`
      );
    })
    .join("");
  return `<table class="audit"><tbody>${rows}</tbody></table>`;
}
