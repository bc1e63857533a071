/** Render-package manifest: schema types and validation. */

export const SUPPORTED_FORMAT_VERSION = "1";

export interface ViewEncoding {
  channels: number;
  alpha: number;
  enabled: boolean;
  centers: number[];
}

export interface ShaderSpec {
  widths: number[];
  activations: string[];
  weights: number[][][]; // per layer: [out][in]
  biases: number[][];    // per layer: [out]
}

export interface Manifest {
  format_version: string;
  channels: number;
  texture_resolution: number;
  atlas_resolution: number;
  channel_ranges: [number, number][];
  view_encoding: ViewEncoding;
  shader: ShaderSpec;
  background: [number, number, number];
  mesh: string;
  texture_planes: string[];
}

export class PackageFormatError extends Error {}

function expect(cond: boolean, message: string): asserts cond {
  if (!cond) throw new PackageFormatError(message);
}

export function parseManifest(json: unknown): Manifest {
  expect(typeof json === "object" && json !== null, "manifest: not an object");
  const m = json as Record<string, unknown>;

  expect(
    m.format_version === SUPPORTED_FORMAT_VERSION,
    `manifest: unsupported format version ${JSON.stringify(m.format_version)} ` +
      `(this viewer reads version "${SUPPORTED_FORMAT_VERSION}")`,
  );
  const channels = m.channels;
  expect(typeof channels === "number" && channels >= 1,
    "manifest: bad channel count");
  const planes = m.texture_planes;
  expect(Array.isArray(planes) && planes.every((p) => typeof p === "string"),
    "manifest: texture_planes must be file names");
  const needed = Math.ceil((channels as number) / 4);
  expect(planes.length === needed,
    `texture planes: ${channels} channels need ${needed} planes, ` +
      `manifest lists ${planes.length}`);

  const ranges = m.channel_ranges;
  expect(Array.isArray(ranges) && ranges.length === channels,
    "manifest: channel_ranges length must equal channels");
  for (const r of ranges as unknown[]) {
    expect(Array.isArray(r) && r.length === 2
      && r.every((x) => typeof x === "number" && Number.isFinite(x)),
      "manifest: each channel range is [min, max]");
  }

  const enc = m.view_encoding as Record<string, unknown>;
  expect(typeof enc === "object" && enc !== null, "manifest: missing view_encoding");
  expect(enc.channels === channels, "view_encoding: channel count mismatch");
  expect(typeof enc.alpha === "number" && (enc.alpha as number) > 0,
    "view_encoding: alpha must be positive");
  expect(Array.isArray(enc.centers) && enc.centers.length === channels,
    "view_encoding: centers length mismatch");

  const shader = m.shader as Record<string, unknown>;
  expect(typeof shader === "object" && shader !== null, "manifest: missing shader");
  const widths = shader.widths as number[];
  expect(Array.isArray(widths) && widths.length >= 2, "shader: bad widths");
  expect(widths[0] === channels, "shader: input width must equal channels");
  expect(widths[widths.length - 1] === 3, "shader: output width must be 3");
  const weights = shader.weights as number[][][];
  const biases = shader.biases as number[][];
  expect(Array.isArray(weights) && weights.length === widths.length - 1,
    "shader: one weight matrix per layer");
  expect(Array.isArray(biases) && biases.length === widths.length - 1,
    "shader: one bias vector per layer");
  for (let i = 0; i < widths.length - 1; i++) {
    expect(weights[i].length === widths[i + 1]
      && weights[i].every((row) => row.length === widths[i]),
      `shader: layer ${i} weight shape mismatch`);
    expect(biases[i].length === widths[i + 1],
      `shader: layer ${i} bias shape mismatch`);
  }
  const acts = shader.activations as string[];
  expect(Array.isArray(acts) && acts.length === widths.length - 1,
    "shader: one activation per layer");
  for (const a of acts) {
    expect(a === "relu" || a === "sigmoid" || a === "none",
      `shader: unknown activation ${a}`);
  }

  const bg = m.background;
  expect(Array.isArray(bg) && bg.length === 3
    && bg.every((x) => typeof x === "number"),
    "manifest: background must be an rgb triple");
  expect(typeof m.mesh === "string", "manifest: missing mesh file name");

  return m as unknown as Manifest;
}

/** value = min + byte/255 * (max - min), vectorized over channels. */
export function dequantize(byteValue: number, range: [number, number]): number {
  return range[0] + (byteValue / 255.0) * (range[1] - range[0]);
}
