// Box overlay geometry: normalized [0,1] boxes to CSS pixels and back.
// Screen coordinates are whole pixels, so one display pixel of round-trip
// error is the contract.

export type NormalizedBox = [number, number, number, number];

export interface DisplayBox {
  left: number;
  top: number;
  width: number;
  height: number;
}

export function boxToScreen(box: NormalizedBox, displayW: number, displayH: number): DisplayBox {
  const [x0, y0, x1, y1] = box;
  const left = Math.round(x0 * displayW);
  const top = Math.round(y0 * displayH);
  return {
    left,
    top,
    width: Math.max(1, Math.round(x1 * displayW) - left),
    height: Math.max(1, Math.round(y1 * displayH) - top),
  };
}

export function screenToBox(display: DisplayBox, displayW: number, displayH: number): NormalizedBox {
  return [
    display.left / displayW,
    display.top / displayH,
    (display.left + display.width) / displayW,
    (display.top + display.height) / displayH,
  ];
}

/** Largest per-corner error, in display pixels, of a round trip. */
export function roundTripError(box: NormalizedBox, displayW: number, displayH: number): number {
  const back = screenToBox(boxToScreen(box, displayW, displayH), displayW, displayH);
  const errors = [
    Math.abs(back[0] - box[0]) * displayW,
    Math.abs(back[1] - box[1]) * displayH,
    Math.abs(back[2] - box[2]) * displayW,
    Math.abs(back[3] - box[3]) * displayH,
  ];
  return Math.max(...errors);
}
