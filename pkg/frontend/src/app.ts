// Single-page review app. Reads ?run=&api=&token= from the URL, renders the
// service-ordered queue, and drives review with the keyboard:
//   y confirm as the top-priority class, n reject, s skip,
//   m toggle masked/unmasked crop, arrows move without deciding.

import { QueueEntry, TriageApi, VoteRow } from './api.js';
import { boxToScreen } from './overlay.js';
import { ReviewSession } from './queue.js';
import { WhatifPanel } from './whatif.js';

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function fmtPct(value: number): string {
  return `${(100 * value).toFixed(1)}%`;
}

class App {
  private readonly api: TriageApi;
  private readonly session: ReviewSession;
  private panel: WhatifPanel | null = null;
  private showMasked: boolean;
  private root: HTMLElement;

  constructor(root: HTMLElement, api: TriageApi, session: ReviewSession) {
    this.root = root;
    this.api = api;
    this.session = session;
    this.showMasked = false;
  }

  static async boot(root: HTMLElement): Promise<App> {
    const params = new URLSearchParams(window.location.search);
    const base = params.get('api') ?? '';
    const runId = params.get('run') ?? '';
    const reviewer = params.get('reviewer') ?? 'ecologist';
    const api = new TriageApi(base, params.get('token') ?? undefined);
    const session = new ReviewSession(api, runId, reviewer);
    const app = new App(root, api, session);
    if (!runId) {
      app.renderRunPrompt();
      return app;
    }
    await session.load();
    // masked view is the default when the run itself used segmentation
    app.showMasked = Boolean(session.run?.config.segmentation);
    app.attachKeyboard();
    app.render();
    void app.initWhatif();
    return app;
  }

  private renderRunPrompt(): void {
    this.root.replaceChildren();
    const form = el('div', 'run-prompt');
    form.append(el('h1', undefined, 'wildtriage review'));
    const input = el('input');
    input.placeholder = 'run id, e.g. run-0001';
    const go = el('button', undefined, 'open run');
    go.onclick = () => {
      const params = new URLSearchParams(window.location.search);
      params.set('run', input.value.trim());
      window.location.search = params.toString();
    };
    form.append(input, go);
    this.root.replaceChildren(form);
  }

  private attachKeyboard(): void {
    window.addEventListener('keydown', (event) => {
      if (event.target instanceof HTMLInputElement) return;
      switch (event.key) {
        case 'y':
          void this.session.confirm().then(() => this.render());
          break;
        case 'n':
          void this.session.reject().then(() => this.render());
          break;
        case 's':
          this.session.skip();
          this.render();
          break;
        case 'm':
          this.showMasked = !this.showMasked;
          this.render();
          break;
        case 'ArrowDown':
          this.session.index = Math.min(this.session.index + 1, this.session.entries.length);
          this.render();
          break;
        case 'ArrowUp':
          this.session.index = Math.max(this.session.index - 1, 0);
          this.render();
          break;
      }
    });
  }

  private whatifPanelEl: HTMLElement | null = null;

  private async initWhatif(): Promise<void> {
    if (!this.session.run) return;
    const panel = new WhatifPanel(
      this.api,
      this.session.runId,
      this.session.run.taxonomy.classes,
    );
    this.panel = panel;
    panel.onChange(() => this.renderWhatif(panel));
    await panel.loadBaseline();
  }

  render(): void {
    this.root.replaceChildren();
    const layout = el('div', 'layout');
    layout.append(this.renderQueue(), this.renderMain(), this.renderSidebar());
    this.root.append(layout);
  }

  private renderQueue(): HTMLElement {
    const list = el('div', 'queue');
    list.append(el('h2', undefined, `queue (${this.session.entries.length})`));
    this.session.entries.forEach((entry, index) => {
      const row = el('div', 'queue-row' + (index === this.session.index ? ' active' : ''));
      const thumb = el('img', 'thumb') as HTMLImageElement;
      thumb.loading = 'lazy'; // thumbnails lazy-load
      const url = this.api.artifactUrl(entry, 'original');
      if (url) thumb.src = url;
      row.append(thumb);
      const meta = el('div', 'meta');
      meta.append(el('div', 'label', `${entry.rank}. ${entry.final_label}`));
      meta.append(el('div', 'score', fmtPct(entry.wildcat_score)));
      if (entry.reviewed) {
        meta.append(el('div', 'decision', `✓ ${entry.decided_label ?? ''}`));
      }
      row.append(meta);
      row.onclick = () => {
        this.session.index = index;
        this.render();
      };
      list.append(row);
    });
    return list;
  }

  private renderMain(): HTMLElement {
    const main = el('div', 'main');
    const entry = this.session.current;
    if (!entry) {
      main.append(el('h2', undefined, 'queue complete'));
      return main;
    }
    main.append(el('h2', undefined, entry.image_id));

    const hasMasked = 'masked_crop' in entry.artifacts;
    const kind = this.showMasked && hasMasked ? 'masked_crop' : 'crop' in entry.artifacts ? 'crop' : 'original';
    const viewer = el('div', 'viewer');
    const img = el('img', 'frame') as HTMLImageElement;
    const url = this.api.artifactUrl(entry, kind as 'original' | 'crop' | 'masked_crop');
    if (url) img.src = url;
    viewer.append(img);
    if (kind === 'original') {
      img.addEventListener('load', () => this.drawOverlays(viewer, img, entry));
    }
    main.append(viewer);

    const toggles = el('div', 'toggles');
    toggles.append(el('span', undefined, `view: ${kind.replace('_', ' ')}`));
    if (hasMasked) toggles.append(el('span', 'hint', "press 'm' to toggle mask"));
    main.append(toggles);

    if (this.session.lastError) {
      const banner = el('div', 'error-banner',
        `decision rejected: ${this.session.lastError.message}`);
      main.append(banner);
    }

    main.append(this.renderVotes(entry.votes));
    const help = el('div', 'help',
      `y = confirm ${this.session.confirmLabel} · n = reject ` +
      `(${this.session.defaultRejectLabel}) · s = skip`);
    main.append(help);
    return main;
  }

  private drawOverlays(viewer: HTMLElement, img: HTMLImageElement, entry: QueueEntry): void {
    viewer.querySelectorAll('.overlay').forEach((node) => node.remove());
    for (const stored of entry.boxes) {
      const display = boxToScreen(stored.box, img.clientWidth, img.clientHeight);
      const overlay = el('div', 'overlay');
      overlay.style.left = `${display.left}px`;
      overlay.style.top = `${display.top}px`;
      overlay.style.width = `${display.width}px`;
      overlay.style.height = `${display.height}px`;
      overlay.title = `${stored.detector_class} ${fmtPct(stored.confidence)}`;
      viewer.append(overlay);
    }
  }

  private renderVotes(votes: VoteRow[]): HTMLElement {
    const table = el('table', 'votes');
    const head = el('tr');
    for (const column of ['model', 'scale', 'box', 'label', 'top score']) {
      head.append(el('th', undefined, column));
    }
    table.append(head);
    for (const vote of votes) {
      const row = el('tr');
      row.append(el('td', undefined, vote.model_id));
      row.append(el('td', undefined, vote.scale));
      row.append(el('td', undefined, vote.box_index === null ? '—' : String(vote.box_index)));
      row.append(el('td', undefined, vote.label));
      row.append(el('td', undefined, fmtPct(Math.max(...vote.scores))));
      table.append(row);
    }
    return table;
  }

  private renderSidebar(): HTMLElement {
    const side = el('div', 'sidebar');
    side.append(el('h2', undefined, 'what-if'));
    this.whatifPanelEl = el('div', 'whatif');
    side.append(this.whatifPanelEl);
    if (this.panel) this.renderWhatif(this.panel);
    return side;
  }

  private renderWhatif(panel: WhatifPanel): void {
    const container = this.whatifPanelEl;
    if (!container) return;
    container.replaceChildren();

    const methodRow = el('div', 'control');
    methodRow.append(el('label', undefined, 'vote method'));
    const select = el('select') as HTMLSelectElement;
    for (const method of ['', 'hierarchical', 'best_accuracy']) {
      const option = el('option', undefined, method || '(run default)') as HTMLOptionElement;
      option.value = method;
      select.append(option);
    }
    select.value = panel.state.method ?? '';
    select.onchange = () => panel.setMethod(select.value || undefined);
    methodRow.append(select);
    container.append(methodRow);

    const sliderRow = el('div', 'control');
    sliderRow.append(el('label', undefined,
      `min confidence ${panel.state.minConfidence ?? '(run default)'}`));
    const slider = el('input') as HTMLInputElement;
    slider.type = 'range';
    slider.min = String(this.session.run?.config.min_confidence ?? 0);
    slider.max = '1';
    slider.step = '0.05';
    slider.oninput = () => panel.setMinConfidence(Number(slider.value));
    sliderRow.append(slider);
    container.append(sliderRow);

    if (panel.state.unsupported) {
      container.append(el('div', 'unsupported', panel.state.unsupported));
      return;
    }
    if (panel.state.pending) {
      container.append(el('div', 'pending', 'recomputing…'));
      return;
    }
    if (panel.state.noChanges) {
      container.append(el('div', 'no-changes', 'no changes under these settings'));
    }
    if (panel.state.counts) {
      const table = el('table', 'counts');
      for (const [label, count] of Object.entries(panel.state.counts)) {
        const row = el('tr');
        row.append(el('td', undefined, label));
        row.append(el('td', undefined, String(count)));
        const delta = panel.state.deltas?.[label] ?? 0;
        row.append(el('td', delta === 0 ? '' : delta > 0 ? 'up' : 'down',
          delta === 0 ? '' : delta > 0 ? `+${delta}` : String(delta)));
        table.append(row);
      }
      container.append(table);
    }
    if (panel.state.moved.length) {
      const moved = el('div', 'moved');
      moved.append(el('h3', undefined, `moved images (${panel.state.moved.length})`));
      for (const move of panel.state.moved.slice(0, 20)) {
        moved.append(el('div', undefined, `${move.image_id}: ${move.from} → ${move.to}`));
      }
      container.append(moved);

      const preview = el('div', 'preview');
      preview.append(el('h3', undefined, 'queue preview'));
      for (const entry of panel.queuePreview(this.session.entries).slice(0, 10)) {
        preview.append(el('div', undefined,
          `${entry.rank}. ${entry.image_id} (${entry.final_label})`));
      }
      container.append(preview);
    }
  }
}

if (typeof document !== 'undefined' && document.getElementById('app')) {
  void App.boot(document.getElementById('app') as HTMLElement);
}

export { App };
