// What-if exploration panel: debounced endpoint calls, label-count deltas,
// moved-image list, and a non-persisting queue preview. All numbers shown
// are the endpoint's verbatim; the panel never writes anything.

import { MovedImage, QueueEntry, TriageApi, WhatifOverrides, WhatifSummary } from './api.js';
import { ApiError } from './api.js';

export interface WhatifPanelState {
  method?: string;
  minConfidence?: number;
  aggregation?: string;
  baselineCounts: Record<string, number> | null;
  counts: Record<string, number> | null;
  deltas: Record<string, number> | null;
  moved: MovedImage[];
  noChanges: boolean;
  unsupported: string | null;
  pending: boolean;
}

export class WhatifPanel {
  state: WhatifPanelState = {
    baselineCounts: null,
    counts: null,
    deltas: null,
    moved: [],
    noChanges: true,
    unsupported: null,
    pending: false,
  };

  private timer: ReturnType<typeof setTimeout> | null = null;
  private inflight: Promise<WhatifPanelState> | null = null;
  private listeners: Array<(state: WhatifPanelState) => void> = [];

  constructor(
    private readonly api: TriageApi,
    readonly runId: string,
    private readonly taxonomyClasses: string[],
    private readonly debounceMs = 150,
  ) {}

  onChange(listener: (state: WhatifPanelState) => void): void {
    this.listeners.push(listener);
  }

  private emit(): void {
    for (const listener of this.listeners) listener(this.state);
  }

  /** Baseline = the run's own configuration (no overrides). */
  async loadBaseline(): Promise<void> {
    const summary = await this.api.whatif(this.runId, {});
    this.state.baselineCounts = summary.label_counts;
    this.state.counts = summary.label_counts;
    this.state.deltas = this.computeDeltas(summary.label_counts);
    this.state.moved = summary.moved;
    this.state.noChanges = summary.moved.length === 0;
    this.emit();
  }

  setMethod(method: string | undefined): void {
    this.state.method = method;
    this.schedule();
  }

  setMinConfidence(value: number | undefined): void {
    this.state.minConfidence = value;
    this.schedule();
  }

  setAggregation(policy: string | undefined): void {
    this.state.aggregation = policy;
    this.schedule();
  }

  private overrides(): WhatifOverrides {
    const out: WhatifOverrides = {};
    if (this.state.method !== undefined) out.method = this.state.method;
    if (this.state.minConfidence !== undefined) out.minConf = this.state.minConfidence;
    if (this.state.aggregation !== undefined) out.aggregation = this.state.aggregation;
    return out;
  }

  private schedule(): void {
    if (this.timer) clearTimeout(this.timer);
    this.state.pending = true;
    this.timer = setTimeout(() => void this.refresh(), this.debounceMs);
    this.emit();
  }

  /** Run the pending (or an immediate) refresh now; tests await this. */
  async flush(): Promise<WhatifPanelState> {
    if (this.timer) {
      clearTimeout(this.timer);
      this.timer = null;
    }
    await this.refresh();
    return this.state;
  }

  private async refresh(): Promise<void> {
    const request = this.applySummary(this.api.whatif(this.runId, this.overrides()));
    this.inflight = request;
    await request;
    if (this.inflight === request) this.inflight = null;
  }

  private async applySummary(pending: Promise<WhatifSummary>): Promise<WhatifPanelState> {
    try {
      const summary = await pending;
      this.state.counts = summary.label_counts;
      this.state.deltas = this.computeDeltas(summary.label_counts);
      this.state.moved = summary.moved;
      this.state.noChanges = summary.moved.length === 0;
      this.state.unsupported = null;
    } catch (error) {
      if (error instanceof ApiError && error.status === 400) {
        // e.g. lowering the detection threshold below the run's own
        this.state.unsupported = error.detail;
        this.state.counts = null;
        this.state.deltas = null;
        this.state.moved = [];
        this.state.noChanges = true;
      } else {
        throw error;
      }
    } finally {
      this.state.pending = false;
      this.emit();
    }
    return this.state;
  }

  private computeDeltas(counts: Record<string, number>): Record<string, number> | null {
    if (!this.state.baselineCounts) return null;
    const deltas: Record<string, number> = {};
    for (const label of Object.keys(counts)) {
      deltas[label] = counts[label] - (this.state.baselineCounts[label] ?? 0);
    }
    return deltas;
  }

  /**
   * Reorder a queue under the hypothetical labels without persisting
   * anything: the service's ordering key applied to moved labels.
   */
  queuePreview(entries: QueueEntry[]): QueueEntry[] {
    const movedTo = new Map(this.state.moved.map((m) => [m.image_id, m.to]));
    const priority = new Map(this.taxonomyClasses.map((label, i) => [label, i]));
    const preview = entries.map((entry) => ({
      ...entry,
      final_label: movedTo.get(entry.image_id) ?? entry.final_label,
    }));
    preview.sort((a, b) => {
      const pa = priority.get(a.final_label) ?? Number.MAX_SAFE_INTEGER;
      const pb = priority.get(b.final_label) ?? Number.MAX_SAFE_INTEGER;
      if (pa !== pb) return pa - pb;
      if (a.wildcat_score !== b.wildcat_score) return b.wildcat_score - a.wildcat_score;
      return a.image_id < b.image_id ? -1 : a.image_id > b.image_id ? 1 : 0;
    });
    return preview.map((entry, i) => ({ ...entry, rank: i + 1 }));
  }
}
