// Keyboard-driven review session: confirm / reject / skip over the
// service-ordered queue. Decisions post optimistically and roll back if the
// service rejects them.

import { ApiError, QueueEntry, RunRecord, TriageApi } from './api.js';

export type SessionError = { message: string; image_id: string } | null;

export interface ReviewOutcome {
  status: 'accepted' | 'duplicate' | 'rejected' | 'skipped';
  image_id: string;
  label?: string;
}

export class ReviewSession {
  entries: QueueEntry[] = [];
  index = 0;
  run: RunRecord | null = null;
  lastError: SessionError = null;

  constructor(
    private readonly api: TriageApi,
    readonly runId: string,
    readonly reviewer: string,
  ) {}

  async load(filter?: string[]): Promise<void> {
    this.run = await this.api.getRun(this.runId);
    this.entries = await this.api.fetchWholeQueue(this.runId, filter);
    this.index = 0;
    this.lastError = null;
  }

  get current(): QueueEntry | null {
    return this.entries[this.index] ?? null;
  }

  get done(): boolean {
    return this.index >= this.entries.length;
  }

  /** Highest-priority class; what "confirm" asserts the image contains. */
  get confirmLabel(): string {
    if (!this.run) throw new Error('session not loaded');
    return this.run.taxonomy.classes[0];
  }

  /** Default rejection target: the lowest-priority (discard) class. */
  get defaultRejectLabel(): string {
    if (!this.run) throw new Error('session not loaded');
    const classes = this.run.taxonomy.classes;
    return classes[classes.length - 1];
  }

  confirm(): Promise<ReviewOutcome> {
    return this.decide(this.confirmLabel);
  }

  reject(label?: string): Promise<ReviewOutcome> {
    return this.decide(label ?? this.defaultRejectLabel);
  }

  skip(): ReviewOutcome {
    const entry = this.current;
    if (!entry) return { status: 'skipped', image_id: '' };
    this.index += 1;
    this.lastError = null;
    return { status: 'skipped', image_id: entry.image_id };
  }

  private async decide(label: string): Promise<ReviewOutcome> {
    const entry = this.current;
    if (!entry) return { status: 'skipped', image_id: '' };

    // optimistic: mark and advance immediately, restore on rejection
    const previous = { reviewed: entry.reviewed, decided_label: entry.decided_label };
    entry.reviewed = true;
    entry.decided_label = label;
    this.index += 1;
    this.lastError = null;
    try {
      const ack = await this.api.postDecision(this.runId, {
        image_id: entry.image_id,
        reviewer: this.reviewer,
        decided_label: label,
      });
      return { status: ack.status, image_id: entry.image_id, label };
    } catch (error) {
      entry.reviewed = previous.reviewed;
      entry.decided_label = previous.decided_label;
      this.index -= 1;
      const message = error instanceof ApiError ? error.detail : String(error);
      this.lastError = { message, image_id: entry.image_id };
      return { status: 'rejected', image_id: entry.image_id, label };
    }
  }
}
