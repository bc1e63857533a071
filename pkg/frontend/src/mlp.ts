/** CPU reference evaluation of the baked shading chain, used by tests and
 * parity probes. Mirrors the fragment shader math in float arithmetic. */

import { Manifest, ShaderSpec, ViewEncoding } from "./manifest.js";

export function gaussianWeights(enc: ViewEncoding, vcos: number): number[] {
  if (!enc.enabled) return enc.centers.map(() => 1.0);
  const peak = 1.0 / (enc.alpha * Math.sqrt(2.0 * Math.PI));
  return enc.centers.map((t) => {
    const d = vcos - t;
    return peak * Math.exp(-(d * d) / (2.0 * enc.alpha * enc.alpha));
  });
}

function activate(x: number, tag: string): number {
  if (tag === "relu") return Math.max(x, 0);
  if (tag === "sigmoid") return 1.0 / (1.0 + Math.exp(-x));
  return x;
}

export function evalMlp(shader: ShaderSpec, input: number[]): number[] {
  let h = input.slice();
  for (let layer = 0; layer < shader.weights.length; layer++) {
    const w = shader.weights[layer];
    const b = shader.biases[layer];
    const out = new Array<number>(w.length);
    for (let o = 0; o < w.length; o++) {
      let acc = b[o];
      const row = w[o];
      for (let i = 0; i < row.length; i++) acc += row[i] * h[i];
      out[o] = activate(acc, shader.activations[layer]);
    }
    h = out;
  }
  return h;
}

/** Full per-fragment chain: dequantized features -> view weighting -> MLP. */
export function shadeReference(
  manifest: Manifest,
  features: number[],
  vcos: number,
  encodingEnabled = true,
): number[] {
  const weights = encodingEnabled
    ? gaussianWeights(manifest.view_encoding, vcos)
    : features.map(() => 1.0);
  const fl = features.map((f, i) => f * weights[i]);
  return evalMlp(manifest.shader, fl);
}
