import { TriageApi } from '../src/api.js';

export function baseUrl(): string {
  const port = Number(process.env.WILDTRIAGE_UI_TEST_PORT ?? 8931);
  return `http://127.0.0.1:${port}`;
}

export function api(): TriageApi {
  return new TriageApi(baseUrl());
}

export interface DecisionLogRecord {
  record: string;
  active?: boolean;
  image_id?: string;
  reviewer?: string;
  decided_label?: string;
}

export function parseDecisionLog(payload: string): DecisionLogRecord[] {
  return payload
    .trim()
    .split('\n')
    .map((line) => JSON.parse(line) as DecisionLogRecord);
}
