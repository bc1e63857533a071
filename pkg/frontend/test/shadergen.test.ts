import { describe, expect, it } from "vitest";
import { genFragmentShader, VERTEX_SHADER } from "../src/shadergen.js";
import { parseManifest } from "../src/manifest.js";
import { validManifest } from "./fixtures.js";

function extractArray(glsl: string, name: string): number[] {
  const match = glsl.match(new RegExp(
    `const float ${name}\\[(\\d+)\\] = float\\[\\d+\\]\\(([^;]*)\\);`));
  if (!match) throw new Error(`array ${name} not found`);
  const values = match[2].split(",").map((s) => parseFloat(s));
  expect(values).toHaveLength(parseInt(match[1], 10));
  return values;
}

describe("genFragmentShader", () => {
  it("bakes every weight and bias as constants", () => {
    const m = parseManifest(validManifest(12));
    const glsl = genFragmentShader(m);
    for (let l = 0; l < m.shader.weights.length; l++) {
      const w = extractArray(glsl, `W${l}`);
      const flat = m.shader.weights[l].flat();
      expect(w).toHaveLength(flat.length);
      for (let i = 0; i < flat.length; i++) {
        expect(w[i]).toBeCloseTo(flat[i], 6);
      }
      const b = extractArray(glsl, `B${l}`);
      for (let i = 0; i < b.length; i++) {
        expect(b[i]).toBeCloseTo(m.shader.biases[l][i], 6);
      }
    }
  });

  it("bakes dequantization ranges and gaussian centers", () => {
    const m = parseManifest(validManifest(8));
    const glsl = genFragmentShader(m);
    const mins = extractArray(glsl, "C_MIN");
    const spans = extractArray(glsl, "C_SPAN");
    for (let c = 0; c < 8; c++) {
      expect(mins[c]).toBeCloseTo(m.channel_ranges[c][0], 6);
      expect(spans[c]).toBeCloseTo(
        m.channel_ranges[c][1] - m.channel_ranges[c][0], 6);
    }
    const centers = extractArray(glsl, "T_CENTER");
    expect(centers).toHaveLength(8);
    expect(centers[7]).toBeCloseTo(1.0, 9);
  });

  it("binds one sampler per plane and matches the plane count", () => {
    for (const [k, planes] of [[8, 2], [12, 3], [16, 4]] as const) {
      const glsl = genFragmentShader(parseManifest(validManifest(k)));
      for (let p = 0; p < planes; p++) {
        expect(glsl).toContain(`uniform sampler2D u_plane${p};`);
      }
      expect(glsl).not.toContain(`u_plane${planes};`);
    }
  });

  it("computes the view cosine from the negated view direction", () => {
    const glsl = genFragmentShader(parseManifest(validManifest(8)));
    expect(glsl).toContain("float vcos = dot(-d, n);");
    expect(glsl).toContain("normalize(v_worldPos - u_camPos)");
  });

  it("emits only float literals (no bare ints in float arrays)", () => {
    const m = parseManifest(validManifest(8));
    m.shader.biases[0][0] = 1; // integer-valued float
    const glsl = genFragmentShader(m);
    const b0 = glsl.match(/const float B0\[\d+\] = float\[\d+\]\(([^;]*)\);/)![1];
    expect(b0.split(",")[0].trim()).toBe("1.0");
  });

  it("vertex shader passes world position, normal, and uv through", () => {
    expect(VERTEX_SHADER).toContain("v_worldPos = a_position;");
    expect(VERTEX_SHADER).toContain("v_uv = a_uv;");
  });
});
