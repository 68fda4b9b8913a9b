import { ApiClient, ApiFailure } from "./api.js";
import { filterQueue, toQueueItem } from "./queue.js";
import { renderAudit, renderQueue, renderRetryBanner } from "./render.js";
import { VerdictController } from "./submit.js";
import type { ReviewQueueItem, Settings } from "./types.js";

/** Console application state and DOM wiring. The server is authoritative;
 * every mutation is followed by a reload of the affected view. */
export class ConsoleApp {
  private items: ReviewQueueItem[] = [];
  private selected = 0;
  private statusFilter: string | undefined = "ACTIVE";
  private language: "de" | "en";
  readonly verdicts: VerdictController;

  constructor(
    private readonly api: ApiClient,
    private readonly root: { queue: Element; audit: Element; banner: Element },
    settings: Settings,
  ) {
    this.language = settings.language ?? "en";
    this.verdicts = new VerdictController(api, () => this.refresh());
  }

  async refresh(): Promise<void> {
    try {
      const serverStatus = this.statusFilter === "ACTIVE" ? undefined : this.statusFilter;
      const cases = await this.api.listCases(serverStatus);
      this.items = filterQueue(cases.map(toQueueItem), this.statusFilter);
      this.selected = Math.min(this.selected, Math.max(0, this.items.length - 1));
      this.root.banner.innerHTML = "";
      this.root.queue.innerHTML = renderQueue(this.items, this.language, this.selected);
      this.root.audit.innerHTML = renderAudit(await this.api.audit(), this.language);
    } catch (err) {
      // keep the last rendered queue; the actor loses no context
      const detail = err instanceof ApiFailure ? err.error.detail : String(err);
      this.root.banner.innerHTML = renderRetryBanner(detail, this.language);
    }
  }

  setFilter(status: string | undefined): Promise<void> {
    this.statusFilter = status;
    return this.refresh();
  }

  selectedItem(): ReviewQueueItem | undefined {
    return this.items[this.selected];
  }

  moveSelection(delta: number): void {
    if (this.items.length === 0) return;
    this.selected = (this.selected + delta + this.items.length) % this.items.length;
    this.root.queue.innerHTML = renderQueue(this.items, this.language, this.selected);
  }

  async decide(decision: "MERGE" | "SEPARATE"): Promise<void> {
    const item = this.selectedItem();
    if (!item || !item.resolvable) return;
    const outcome = await this.verdicts.submit(
      { caseId: item.caseId, decision },
      item.version,
    );
    if (outcome.kind === "accepted") await this.refresh();
    if (outcome.kind === "failed") {
      this.root.banner.innerHTML = renderRetryBanner(
        `${item.caseId}: ${outcome.detail}`,
        this.language,
      );
    }
  }

  async requestPlaintext(): Promise<void> {
    const item = this.selectedItem();
    if (!item) return;
    await this.api.requestPlaintext(item.caseId);
    await this.refresh();
  }

  handleKey(key: string): Promise<void> | void {
    switch (key) {
      case "j":
      case "ArrowDown":
        return this.moveSelection(1);
      case "k":
      case "ArrowUp":
        return this.moveSelection(-1);
      case "m":
        return this.decide("MERGE");
      case "s":
        return this.decide("SEPARATE");
      case "r":
        return this.refresh();
    }
  }
}

export async function loadSettings(fetchImpl: typeof fetch = fetch): Promise<Settings> {
  const response = await fetchImpl("./settings.json");
  if (!response.ok) throw new Error("settings.json missing next to index.html");
  const raw = await response.json();
  if (typeof raw.apiBaseUrl !== "string" || typeof raw.apiKey !== "string") {
    throw new Error("settings.json needs apiBaseUrl and apiKey");
  }
  return raw as Settings;
}

export async function mount(document: Document): Promise<ConsoleApp> {
  const settings = await loadSettings();
  const api = new ApiClient(settings);
  const app = new ConsoleApp(
    api,
    {
      queue: document.querySelector("#queue")!,
      audit: document.querySelector("#audit")!,
      banner: document.querySelector("#banner")!,
    },
    settings,
  );
  document.addEventListener("keydown", (e) => void app.handleKey(e.key));
  document.addEventListener("click", (e) => {
    const target = e.target as HTMLElement;
    const action = target.dataset["action"];
    if (action === "merge") void app.decide("MERGE");
    else if (action === "separate") void app.decide("SEPARATE");
    else if (action === "request-plaintext") void app.requestPlaintext();
    else if (action === "retry") void app.refresh();
  });
  const filter = document.querySelector<HTMLSelectElement>("#status-filter");
  filter?.addEventListener("change", () => void app.setFilter(filter.value || undefined));
  await app.refresh();
  return app;
}
