/** App wiring: drag-and-drop or URL-parameter package loading, toggles,
 * FPS/size readouts, and fixed parity cameras on keys 1..5. */

import { Manifest, PackageFormatError, parseManifest } from "./manifest.js";
import { ObjParseError, parseObj } from "./obj.js";
import { Viewer, ViewerError } from "./viewer.js";

const canvas = document.getElementById("view") as HTMLCanvasElement;
const banner = document.getElementById("banner") as HTMLDivElement;
const fpsEl = document.getElementById("fps") as HTMLSpanElement;
const sizeEl = document.getElementById("size") as HTMLSpanElement;
const encToggle = document.getElementById("enc") as HTMLInputElement;
const modeSelect = document.getElementById("mode") as HTMLSelectElement;

let viewer: Viewer | null = null;

function showError(message: string): void {
  banner.textContent = message;
  banner.style.display = "block";
}

function clearError(): void {
  banner.style.display = "none";
}

async function imageFromBlob(blob: Blob): Promise<ImageBitmap> {
  return await createImageBitmap(blob, {
    premultiplyAlpha: "none",
    colorSpaceConversion: "none",
  });
}

interface FileSource {
  text(name: string): Promise<string>;
  blob(name: string): Promise<Blob>;
  size(name: string): number;
}

async function loadPackage(source: FileSource): Promise<void> {
  clearError();
  const manifest: Manifest = parseManifest(
    JSON.parse(await source.text("manifest.json")));
  const mesh = parseObj(await source.text(manifest.mesh));
  const planes: ImageBitmap[] = [];
  for (const name of manifest.texture_planes) {
    planes.push(await imageFromBlob(await source.blob(name)));
  }
  if (!viewer) {
    viewer = new Viewer(canvas);
    viewer.onFps = (fps) => { fpsEl.textContent = `${fps} FPS`; };
    viewer.start();
  }
  viewer.loadPackage(manifest, mesh, planes);
  viewer.encodingEnabled = encToggle.checked;

  const names = ["manifest.json", manifest.mesh, ...manifest.texture_planes];
  const total = names.reduce((acc, n) => acc + source.size(n), 0);
  sizeEl.textContent = `${(total / 1e6).toFixed(1)} MB, ` +
    `${mesh.faceCount} faces, ${manifest.channels} channels`;
}

function sourceFromFiles(files: File[]): FileSource {
  const byName = new Map(files.map((f) => [f.name, f]));
  const get = (name: string): File => {
    const f = byName.get(name);
    if (!f) throw new PackageFormatError(`package file missing: ${name}`);
    return f;
  };
  return {
    text: (name) => get(name).text(),
    blob: async (name) => get(name),
    size: (name) => byName.get(name)?.size ?? 0,
  };
}

function sourceFromUrl(base: string): FileSource {
  const sizes = new Map<string, number>();
  const fetchOk = async (name: string): Promise<Response> => {
    const resp = await fetch(new URL(name, base).toString());
    if (!resp.ok) {
      throw new PackageFormatError(`fetch failed for ${name}: ${resp.status}`);
    }
    return resp;
  };
  return {
    text: async (name) => {
      const r = await fetchOk(name);
      const body = await r.text();
      sizes.set(name, body.length);
      return body;
    },
    blob: async (name) => {
      const r = await fetchOk(name);
      const body = await r.blob();
      sizes.set(name, body.size);
      return body;
    },
    size: (name) => sizes.get(name) ?? 0,
  };
}

function attachUi(): void {
  document.body.addEventListener("dragover", (e) => e.preventDefault());
  document.body.addEventListener("drop", async (e) => {
    e.preventDefault();
    const files = Array.from(e.dataTransfer?.files ?? []);
    if (!files.length) return;
    try {
      await loadPackage(sourceFromFiles(files));
    } catch (err) {
      reportError(err);
    }
  });
  encToggle.addEventListener("change", () => {
    if (viewer) viewer.encodingEnabled = encToggle.checked;
  });
  modeSelect.addEventListener("change", () => {
    if (viewer) viewer.mode = Number(modeSelect.value) as 0 | 1 | 2;
  });
  // fixed parity cameras: the reference renderer evaluates the same five
  window.addEventListener("keydown", (e) => {
    const k = Number(e.key);
    if (viewer && k >= 1 && k <= 5) {
      const cam = parityCamera(k - 1);
      viewer.camera.azimuth = cam.azimuth;
      viewer.camera.elevation = cam.elevation;
      viewer.camera.distance = cam.distance;
    }
  });
}

/** Matches fibonacci_sphere(5) * 2.6 in the reference implementation. */
export function parityCamera(i: number): { azimuth: number; elevation: number; distance: number } {
  const phi = Math.PI * (3.0 - Math.sqrt(5.0)) * i;
  const z = 1.0 - (2.0 * i + 1.0) / 5.0;
  const rho = Math.sqrt(Math.max(1.0 - z * z, 0.0));
  const x = rho * Math.cos(phi);
  const y = rho * Math.sin(phi);
  return {
    azimuth: Math.atan2(y, x),
    elevation: Math.asin(z),
    distance: 2.6,
  };
}

function reportError(err: unknown): void {
  if (err instanceof PackageFormatError || err instanceof ObjParseError
    || err instanceof ViewerError) {
    showError(err.message);
  } else {
    showError(`unexpected error: ${String(err)}`);
    throw err;
  }
}

async function boot(): Promise<void> {
  attachUi();
  const params = new URLSearchParams(window.location.search);
  const pkg = params.get("package");
  if (pkg) {
    try {
      const base = pkg.endsWith("/") ? pkg : pkg + "/";
      await loadPackage(sourceFromUrl(new URL(base, window.location.href).toString()));
    } catch (err) {
      reportError(err);
    }
  }
}

boot();
