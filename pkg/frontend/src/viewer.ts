/** WebGL2 renderer for a loaded render package: mesh + quantized feature
 * planes + baked-constant MLP fragment shader, with live FPS readout. */

import { Manifest } from "./manifest.js";
import { ParsedMesh } from "./obj.js";
import { lookAt, multiply, perspective } from "./mat4.js";
import { OrbitCamera } from "./orbit.js";
import { genFragmentShader, VERTEX_SHADER } from "./shadergen.js";

export type RenderMode = 0 | 1 | 2; // shaded | normals | vcos

export class ViewerError extends Error {}

export class Viewer {
  readonly gl: WebGL2RenderingContext;
  readonly camera: OrbitCamera;
  encodingEnabled = true;
  mode: RenderMode = 0;
  private program: WebGLProgram | null = null;
  private vao: WebGLVertexArrayObject | null = null;
  private indexCount = 0;
  private textures: WebGLTexture[] = [];
  private background: [number, number, number] = [1, 1, 1];
  private frameTimes: number[] = [];
  private raf = 0;
  onFps: ((fps: number) => void) | null = null;

  constructor(private canvas: HTMLCanvasElement) {
    const gl = canvas.getContext("webgl2", { antialias: true });
    if (!gl) throw new ViewerError("WebGL2 is not available");
    this.gl = gl;
    this.camera = new OrbitCamera({ distance: 3.2 });
    this.bindInput();
  }

  loadPackage(manifest: Manifest, mesh: ParsedMesh,
              planes: TexImageSource[]): void {
    const gl = this.gl;
    this.dispose();
    this.background = manifest.background;
    this.program = this.compile(VERTEX_SHADER, genFragmentShader(manifest));

    this.vao = gl.createVertexArray();
    gl.bindVertexArray(this.vao);
    this.uploadAttribute(0, mesh.positions, 3);
    this.uploadAttribute(1, mesh.normals, 3);
    this.uploadAttribute(2, mesh.uvs, 2);
    const ibo = gl.createBuffer();
    gl.bindBuffer(gl.ELEMENT_ARRAY_BUFFER, ibo);
    gl.bufferData(gl.ELEMENT_ARRAY_BUFFER, mesh.indices, gl.STATIC_DRAW);
    this.indexCount = mesh.indices.length;
    gl.bindVertexArray(null);

    this.textures = planes.map((img) => {
      const tex = gl.createTexture()!;
      gl.bindTexture(gl.TEXTURE_2D, tex);
      // feature planes are data, not color: no premultiply, no flip
      gl.pixelStorei(gl.UNPACK_PREMULTIPLY_ALPHA_WEBGL, false);
      gl.pixelStorei(gl.UNPACK_FLIP_Y_WEBGL, false);
      gl.texImage2D(gl.TEXTURE_2D, 0, gl.RGBA, gl.RGBA, gl.UNSIGNED_BYTE, img);
      gl.texParameteri(gl.TEXTURE_2D, gl.TEXTURE_MIN_FILTER, gl.LINEAR);
      gl.texParameteri(gl.TEXTURE_2D, gl.TEXTURE_MAG_FILTER, gl.LINEAR);
      gl.texParameteri(gl.TEXTURE_2D, gl.TEXTURE_WRAP_S, gl.CLAMP_TO_EDGE);
      gl.texParameteri(gl.TEXTURE_2D, gl.TEXTURE_WRAP_T, gl.CLAMP_TO_EDGE);
      return tex;
    });
  }

  start(): void {
    cancelAnimationFrame(this.raf);
    const loop = (now: number) => {
      this.camera.tick();
      this.renderFrame();
      this.recordFps(now);
      this.raf = requestAnimationFrame(loop);
    };
    this.raf = requestAnimationFrame(loop);
  }

  renderFrame(): void {
    const gl = this.gl;
    const w = this.canvas.clientWidth || this.canvas.width;
    const h = this.canvas.clientHeight || this.canvas.height;
    const dpr = (globalThis as { devicePixelRatio?: number }).devicePixelRatio ?? 1;
    if (this.canvas.width !== w * dpr || this.canvas.height !== h * dpr) {
      this.canvas.width = w * dpr;
      this.canvas.height = h * dpr;
    }
    gl.viewport(0, 0, this.canvas.width, this.canvas.height);
    gl.clearColor(this.background[0], this.background[1], this.background[2], 1);
    gl.enable(gl.DEPTH_TEST);
    gl.enable(gl.CULL_FACE);
    gl.cullFace(gl.BACK);
    gl.clear(gl.COLOR_BUFFER_BIT | gl.DEPTH_BUFFER_BIT);
    if (!this.program || !this.vao) return;

    const eye = this.camera.position();
    const view = lookAt(eye, this.camera.target, [0, 0, 1]);
    const proj = perspective((50 * Math.PI) / 180,
      this.canvas.width / this.canvas.height, 0.05, 100);
    const viewProj = multiply(proj, view);

    gl.useProgram(this.program);
    gl.uniformMatrix4fv(this.loc("u_viewProj"), false, viewProj);
    gl.uniform3f(this.loc("u_camPos"), eye[0], eye[1], eye[2]);
    gl.uniform1i(this.loc("u_encodingEnabled"), this.encodingEnabled ? 1 : 0);
    gl.uniform1i(this.loc("u_mode"), this.mode);
    this.textures.forEach((tex, i) => {
      gl.activeTexture(gl.TEXTURE0 + i);
      gl.bindTexture(gl.TEXTURE_2D, tex);
      gl.uniform1i(this.loc(`u_plane${i}`), i);
    });
    gl.bindVertexArray(this.vao);
    gl.drawElements(gl.TRIANGLES, this.indexCount, gl.UNSIGNED_INT, 0);
    gl.bindVertexArray(null);
  }

  /** Read back the current frame (for parity checks against the reference
   * renderer); returns RGBA bytes, bottom-up per GL convention. */
  readPixels(): Uint8Array {
    const gl = this.gl;
    const out = new Uint8Array(this.canvas.width * this.canvas.height * 4);
    gl.readPixels(0, 0, this.canvas.width, this.canvas.height,
      gl.RGBA, gl.UNSIGNED_BYTE, out);
    return out;
  }

  private recordFps(now: number): void {
    this.frameTimes.push(now);
    const cutoff = now - 1000;
    while (this.frameTimes.length && this.frameTimes[0] < cutoff) {
      this.frameTimes.shift();
    }
    if (this.onFps) this.onFps(this.frameTimes.length);
  }

  private bindInput(): void {
    const c = this.canvas;
    c.addEventListener("pointerdown", (e) => {
      c.setPointerCapture(e.pointerId);
      this.camera.pointerDown(e.clientX, e.clientY);
    });
    c.addEventListener("pointermove", (e) =>
      this.camera.pointerMove(e.clientX, e.clientY));
    c.addEventListener("pointerup", () => this.camera.pointerUp());
    c.addEventListener("pointercancel", () => this.camera.pointerUp());
    c.addEventListener("wheel", (e) => {
      e.preventDefault();
      this.camera.wheel(e.deltaY);
    }, { passive: false });
  }

  private uploadAttribute(location: number, data: Float32Array, size: number): void {
    const gl = this.gl;
    const buf = gl.createBuffer();
    gl.bindBuffer(gl.ARRAY_BUFFER, buf);
    gl.bufferData(gl.ARRAY_BUFFER, data, gl.STATIC_DRAW);
    gl.enableVertexAttribArray(location);
    gl.vertexAttribPointer(location, size, gl.FLOAT, false, 0, 0);
  }

  private compile(vsSource: string, fsSource: string): WebGLProgram {
    const gl = this.gl;
    const make = (type: number, source: string) => {
      const shader = gl.createShader(type)!;
      gl.shaderSource(shader, source);
      gl.compileShader(shader);
      if (!gl.getShaderParameter(shader, gl.COMPILE_STATUS)) {
        throw new ViewerError(`shader compile failed: ${gl.getShaderInfoLog(shader)}`);
      }
      return shader;
    };
    const program = gl.createProgram()!;
    gl.attachShader(program, make(gl.VERTEX_SHADER, vsSource));
    gl.attachShader(program, make(gl.FRAGMENT_SHADER, fsSource));
    gl.linkProgram(program);
    if (!gl.getProgramParameter(program, gl.LINK_STATUS)) {
      throw new ViewerError(`shader link failed: ${gl.getProgramInfoLog(program)}`);
    }
    return program;
  }

  private loc(name: string): WebGLUniformLocation | null {
    return this.gl.getUniformLocation(this.program!, name);
  }

  private dispose(): void {
    const gl = this.gl;
    if (this.program) gl.deleteProgram(this.program);
    this.textures.forEach((t) => gl.deleteTexture(t));
    this.textures = [];
    this.program = null;
  }
}
