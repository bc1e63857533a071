/** Deterministic test fixtures shared across the viewer's test modules. */

export interface RawManifest {
  format_version: string;
  channels: number;
  texture_resolution: number;
  atlas_resolution: number;
  channel_ranges: [number, number][];
  view_encoding: {
    channels: number; alpha: number; enabled: boolean; centers: number[];
  };
  shader: {
    widths: number[]; activations: string[];
    weights: number[][][]; biases: number[][];
  };
  background: [number, number, number];
  mesh: string;
  texture_planes: string[];
}

/** Small deterministic LCG so fixtures never depend on Math.random. */
export function lcg(seed: number): () => number {
  let state = seed >>> 0;
  return () => {
    state = (state * 1664525 + 1013904223) >>> 0;
    return state / 2 ** 32;
  };
}

export function validManifest(channels: number): RawManifest {
  const rand = lcg(42 + channels);
  const widths = [channels, 32, 32, 3];
  const weights: number[][][] = [];
  const biases: number[][] = [];
  for (let l = 0; l < widths.length - 1; l++) {
    weights.push(Array.from({ length: widths[l + 1] },
      () => Array.from({ length: widths[l] }, () => rand() * 0.6 - 0.3)));
    biases.push(Array.from({ length: widths[l + 1] }, () => rand() * 0.2 - 0.1));
  }
  const centers = Array.from({ length: channels },
    (_, k) => channels === 1 ? 0 : k / (channels - 1));
  return {
    format_version: "1",
    channels,
    texture_resolution: 64,
    atlas_resolution: 64,
    channel_ranges: Array.from({ length: channels },
      () => [rand() * -1, 1 + rand()] as [number, number]),
    view_encoding: { channels, alpha: 0.3, enabled: true, centers },
    shader: { widths, activations: ["relu", "relu", "sigmoid"], weights, biases },
    background: [1, 1, 1],
    mesh: "mesh.obj",
    texture_planes: Array.from({ length: Math.ceil(channels / 4) },
      (_, i) => `feat_${i}.png`),
  };
}

export const TRIANGLE_OBJ = `mtllib mesh.mtl
usemtl baked
v -0.5 -0.5 0.0
v 0.5 -0.5 0.0
v 0.0 0.5 0.0
vn 0.0 0.0 1.0
vn 0.0 0.0 1.0
vn 0.0 0.0 1.0
vt 0.1 0.1
vt 0.9 0.1
vt 0.5 0.9
f 1/1/1 2/2/2 3/3/3
`;

export const QUAD_OBJ = `v -1.0 -1.0 0.0
v 1.0 -1.0 0.0
v 1.0 1.0 0.0
v -1.0 1.0 0.0
vn 0.0 0.0 1.0
vt 0.0 0.0
vt 1.0 0.0
vt 1.0 1.0
vt 0.0 1.0
f 1/1/1 2/2/1 3/3/1
f 1/1/1 3/3/1 4/4/1
`;
