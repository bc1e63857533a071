/** GLSL generation: the manifest's MLP weights, gaussian centers, and
 * dequantization ranges are baked into the fragment shader as constants
 * (packages are immutable, so constants beat uniforms on the fragment path).
 */

import { Manifest } from "./manifest.js";

function floatLit(x: number): string {
  if (!Number.isFinite(x)) throw new Error("non-finite shader constant");
  const s = String(x);
  return s.includes(".") || s.includes("e") || s.includes("E") ? s : s + ".0";
}

function floatArray(name: string, values: number[]): string {
  const body = values.map(floatLit).join(", ");
  return `const float ${name}[${values.length}] = float[${values.length}](${body});`;
}

export const VERTEX_SHADER = `#version 300 es
precision highp float;
layout(location = 0) in vec3 a_position;
layout(location = 1) in vec3 a_normal;
layout(location = 2) in vec2 a_uv;
uniform mat4 u_viewProj;
out vec3 v_worldPos;
out vec3 v_normal;
out vec2 v_uv;
void main() {
  v_worldPos = a_position;
  v_normal = a_normal;
  v_uv = a_uv;
  gl_Position = u_viewProj * vec4(a_position, 1.0);
}
`;

export function genFragmentShader(manifest: Manifest): string {
  const k = manifest.channels;
  const planes = manifest.texture_planes.length;
  const enc = manifest.view_encoding;
  const sh = manifest.shader;
  const widths = sh.widths;
  const maxWidth = Math.max(...widths);

  const ranges = manifest.channel_ranges;
  const mins = ranges.map((r) => r[0]);
  const spans = ranges.map((r) => r[1] - r[0]);

  const lines: string[] = [];
  lines.push("#version 300 es");
  lines.push("precision highp float;");
  for (let p = 0; p < planes; p++) {
    lines.push(`uniform sampler2D u_plane${p};`);
  }
  lines.push("uniform vec3 u_camPos;");
  lines.push("uniform bool u_encodingEnabled;");
  lines.push("uniform int u_mode; // 0 shaded, 1 normals, 2 vcos");
  lines.push("in vec3 v_worldPos;");
  lines.push("in vec3 v_normal;");
  lines.push("in vec2 v_uv;");
  lines.push("out vec4 o_color;");
  lines.push(floatArray("C_MIN", mins));
  lines.push(floatArray("C_SPAN", spans));
  lines.push(floatArray("T_CENTER", enc.centers));
  lines.push(`const float ALPHA = ${floatLit(enc.alpha)};`);
  lines.push(`const float GAUSS_PEAK = ${floatLit(1.0 / (enc.alpha * Math.sqrt(2 * Math.PI)))};`);
  for (let l = 0; l < sh.weights.length; l++) {
    lines.push(floatArray(`W${l}`, sh.weights[l].flat()));
    lines.push(floatArray(`B${l}`, sh.biases[l]));
  }

  lines.push("void main() {");
  lines.push("  vec3 n = normalize(v_normal);");
  lines.push("  vec3 d = normalize(v_worldPos - u_camPos);");
  lines.push("  float vcos = dot(-d, n);");
  lines.push(`  float feat[${k}];`);
  for (let p = 0; p < planes; p++) {
    lines.push(`  vec4 s${p} = texture(u_plane${p}, v_uv);`);
  }
  for (let c = 0; c < k; c++) {
    const p = Math.floor(c / 4);
    const comp = "rgba"[c % 4];
    lines.push(`  feat[${c}] = C_MIN[${c}] + s${p}.${comp} * C_SPAN[${c}];`);
  }
  lines.push("  if (u_encodingEnabled) {");
  lines.push(`    for (int c = 0; c < ${k}; c++) {`);
  lines.push("      float dv = vcos - T_CENTER[c];");
  lines.push("      feat[c] *= GAUSS_PEAK * exp(-(dv * dv) / (2.0 * ALPHA * ALPHA));");
  lines.push("    }");
  lines.push("  }");

  lines.push(`  float buf0[${maxWidth}];`);
  lines.push(`  float buf1[${maxWidth}];`);
  lines.push(`  for (int i = 0; i < ${k}; i++) buf0[i] = feat[i];`);
  for (let l = 0; l < sh.weights.length; l++) {
    const nin = widths[l];
    const nout = widths[l + 1];
    const src = l % 2 === 0 ? "buf0" : "buf1";
    const dst = l % 2 === 0 ? "buf1" : "buf0";
    lines.push(`  for (int o = 0; o < ${nout}; o++) {`);
    lines.push(`    float acc = B${l}[o];`);
    lines.push(`    for (int i = 0; i < ${nin}; i++) acc += W${l}[o * ${nin} + i] * ${src}[i];`);
    const act = sh.activations[l];
    if (act === "relu") {
      lines.push(`    ${dst}[o] = max(acc, 0.0);`);
    } else if (act === "sigmoid") {
      lines.push(`    ${dst}[o] = 1.0 / (1.0 + exp(-acc));`);
    } else {
      lines.push(`    ${dst}[o] = acc;`);
    }
    lines.push("  }");
  }
  const final = sh.weights.length % 2 === 0 ? "buf0" : "buf1";
  lines.push(`  vec3 rgb = vec3(${final}[0], ${final}[1], ${final}[2]);`);
  lines.push("  if (u_mode == 1) rgb = 0.5 * (n + 1.0);");
  lines.push("  if (u_mode == 2) rgb = vec3(clamp(vcos, 0.0, 1.0));");
  lines.push("  o_color = vec4(rgb, 1.0);");
  lines.push("}");
  return lines.join("\n");
}
