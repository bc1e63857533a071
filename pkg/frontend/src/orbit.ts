/** Orbit camera: azimuth/elevation/distance around a target with clamped
 * elevation and distance bounds. Damping is optional and off by default, so
 * the camera never drifts without input. */

export interface OrbitOptions {
  distance?: number;
  minDistance?: number;
  maxDistance?: number;
  rotateSpeed?: number;   // radians per pixel
  zoomSpeed?: number;     // distance scale per wheel notch
  damping?: number;       // 0 disables inertia
}

const MAX_ELEVATION = (89 * Math.PI) / 180;

export class OrbitCamera {
  azimuth = 0.6;
  elevation = 0.35;
  distance: number;
  target = [0, 0, 0];
  readonly minDistance: number;
  readonly maxDistance: number;
  readonly rotateSpeed: number;
  readonly zoomSpeed: number;
  readonly damping: number;
  private velocityAz = 0;
  private velocityEl = 0;
  private dragging = false;
  private lastX = 0;
  private lastY = 0;

  constructor(opts: OrbitOptions = {}) {
    this.distance = opts.distance ?? 3.0;
    this.minDistance = opts.minDistance ?? 0.3;
    this.maxDistance = opts.maxDistance ?? 25.0;
    this.rotateSpeed = opts.rotateSpeed ?? 0.006;
    this.zoomSpeed = opts.zoomSpeed ?? 0.0015;
    this.damping = opts.damping ?? 0;
  }

  pointerDown(x: number, y: number): void {
    this.dragging = true;
    this.lastX = x;
    this.lastY = y;
  }

  pointerMove(x: number, y: number): void {
    if (!this.dragging) return;
    const dx = x - this.lastX;
    const dy = y - this.lastY;
    this.lastX = x;
    this.lastY = y;
    this.rotate(dx * this.rotateSpeed, -dy * this.rotateSpeed);
    if (this.damping > 0) {
      this.velocityAz = dx * this.rotateSpeed;
      this.velocityEl = -dy * this.rotateSpeed;
    }
  }

  pointerUp(): void {
    this.dragging = false;
  }

  rotate(dAz: number, dEl: number): void {
    this.azimuth += dAz;
    this.elevation = Math.min(MAX_ELEVATION,
      Math.max(-MAX_ELEVATION, this.elevation + dEl));
  }

  wheel(deltaY: number): void {
    const scale = Math.exp(deltaY * this.zoomSpeed);
    this.distance = Math.min(this.maxDistance,
      Math.max(this.minDistance, this.distance * scale));
  }

  /** Per-frame inertia; a no-op when damping is disabled or while dragging. */
  tick(): void {
    if (this.damping <= 0 || this.dragging) return;
    if (Math.abs(this.velocityAz) < 1e-6 && Math.abs(this.velocityEl) < 1e-6) {
      this.velocityAz = 0;
      this.velocityEl = 0;
      return;
    }
    this.rotate(this.velocityAz, this.velocityEl);
    this.velocityAz *= 1 - this.damping;
    this.velocityEl *= 1 - this.damping;
  }

  position(): [number, number, number] {
    const ce = Math.cos(this.elevation);
    return [
      this.target[0] + this.distance * ce * Math.cos(this.azimuth),
      this.target[1] + this.distance * ce * Math.sin(this.azimuth),
      this.target[2] + this.distance * Math.sin(this.elevation),
    ];
  }
}
