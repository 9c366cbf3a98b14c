// Typed client for the triage service HTTP API. Every label and count the
// UI displays comes back from these calls; nothing is classified here.

export interface TaxonomyInfo {
  name: string;
  classes: string[];
  remap?: Record<string, string>;
}

export interface RunRecord {
  run_id: string;
  status: string;
  n_images: number;
  n_results: number;
  n_failures: number;
  config_hash: string;
  taxonomy: TaxonomyInfo;
  config: {
    vote_method: string;
    aggregation: string;
    min_confidence: number;
    segmentation: boolean;
    [key: string]: unknown;
  };
}

export interface StoredBox {
  box: [number, number, number, number];
  confidence: number;
  detector_class: string;
}

export interface VoteRow {
  model_id: string;
  scale: 'local' | 'global';
  box_index: number | null;
  label: string;
  scores: number[];
}

export interface QueueEntry {
  image_id: string;
  final_label: string;
  rank: number;
  wildcat_score: number;
  reviewed: boolean;
  decided_label: string | null;
  artifacts: Record<string, string>;
  boxes: StoredBox[];
  votes: VoteRow[];
}

export interface QueuePage {
  run_id: string;
  total: number;
  page: number;
  page_size: number;
  entries: QueueEntry[];
}

export interface DecisionAck {
  status: 'accepted' | 'duplicate';
  decision: {
    image_id: string;
    reviewer: string;
    decided_label: string;
    decided_at: string;
    run_id: string;
  };
}

export interface MovedImage {
  image_id: string;
  from: string;
  to: string;
}

export interface WhatifOverrides {
  method?: string;
  minConf?: number;
  aggregation?: string;
}

export interface WhatifSummary {
  run_id: string;
  overrides: {
    vote_method: string;
    aggregation: string;
    min_confidence: number;
  };
  label_counts: Record<string, number>;
  moved: MovedImage[];
}

export interface RunStats {
  run_id: string;
  status: string;
  n_images: number;
  label_counts: Record<string, number>;
  decisions_total: number;
  images_reviewed: number;
  review_savings_minutes: number;
  review_rate_per_minute: number;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }
}

async function parseError(response: Response): Promise<never> {
  let detail = response.statusText;
  try {
    const body = await response.json();
    if (typeof body.detail === 'string') detail = body.detail;
    else if (body.detail) detail = JSON.stringify(body.detail);
  } catch {
    // non-JSON error body; keep the status text
  }
  throw new ApiError(response.status, detail);
}

export class TriageApi {
  constructor(
    readonly baseUrl: string,
    readonly token?: string,
  ) {}

  private headers(extra: Record<string, string> = {}): Record<string, string> {
    const headers: Record<string, string> = { ...extra };
    if (this.token) headers['Authorization'] = `Bearer ${this.token}`;
    return headers;
  }

  private async getJson<T>(path: string): Promise<T> {
    const response = await fetch(this.baseUrl + path, { headers: this.headers() });
    if (!response.ok) await parseError(response);
    return response.json() as Promise<T>;
  }

  getRun(runId: string): Promise<RunRecord> {
    return this.getJson(`/runs/${encodeURIComponent(runId)}`);
  }

  getQueue(
    runId: string,
    options: { filter?: string[]; page?: number; pageSize?: number } = {},
  ): Promise<QueuePage> {
    const params = new URLSearchParams();
    if (options.filter?.length) params.set('filter', options.filter.join(','));
    params.set('page', String(options.page ?? 0));
    params.set('page_size', String(options.pageSize ?? 50));
    return this.getJson(`/runs/${encodeURIComponent(runId)}/queue?${params}`);
  }

  async fetchWholeQueue(runId: string, filter?: string[]): Promise<QueueEntry[]> {
    const entries: QueueEntry[] = [];
    let page = 0;
    for (;;) {
      const batch = await this.getQueue(runId, { filter, page, pageSize: 100 });
      entries.push(...batch.entries);
      page += 1;
      if (entries.length >= batch.total || batch.entries.length === 0) return entries;
    }
  }

  async postDecision(
    runId: string,
    decision: { image_id: string; reviewer: string; decided_label: string },
  ): Promise<DecisionAck> {
    const response = await fetch(`${this.baseUrl}/runs/${encodeURIComponent(runId)}/decisions`, {
      method: 'POST',
      headers: this.headers({ 'Content-Type': 'application/json' }),
      body: JSON.stringify(decision),
    });
    if (!response.ok) await parseError(response);
    return response.json() as Promise<DecisionAck>;
  }

  getStats(runId: string): Promise<RunStats> {
    return this.getJson(`/runs/${encodeURIComponent(runId)}/stats`);
  }

  whatif(runId: string, overrides: WhatifOverrides): Promise<WhatifSummary> {
    const params = new URLSearchParams();
    if (overrides.method !== undefined) params.set('method', overrides.method);
    if (overrides.minConf !== undefined) params.set('min_conf', String(overrides.minConf));
    if (overrides.aggregation !== undefined) params.set('aggregation', overrides.aggregation);
    const query = params.toString();
    return this.getJson(`/runs/${encodeURIComponent(runId)}/whatif${query ? `?${query}` : ''}`);
  }

  async exportDecisions(runId: string, format: 'records' | 'xml' = 'records'): Promise<string> {
    const response = await fetch(
      `${this.baseUrl}/runs/${encodeURIComponent(runId)}/export?format=${format}`,
      { headers: this.headers() },
    );
    if (!response.ok) await parseError(response);
    return response.text();
  }

  artifactUrl(entry: QueueEntry, kind: 'original' | 'crop' | 'masked_crop'): string | null {
    const path = entry.artifacts[kind];
    return path ? this.baseUrl + path : null;
  }
}
