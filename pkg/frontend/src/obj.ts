/** Wavefront OBJ parsing for v/vn/vt/f triangles with per-face-vertex uvs.
 *
 * Corners sharing the same (v, vt, vn) triple collapse to one GPU vertex;
 * corners of the same position with different uvs stay distinct, which is
 * exactly what per-face chart atlases need.
 */

export interface ParsedMesh {
  positions: Float32Array; // xyz per vertex
  normals: Float32Array;
  uvs: Float32Array;       // uv per vertex
  indices: Uint32Array;
  vertexCount: number;
  faceCount: number;
}

export class ObjParseError extends Error {}

export function parseObj(text: string): ParsedMesh {
  const pos: number[][] = [];
  const nrm: number[][] = [];
  const uv: number[][] = [];
  const outPos: number[] = [];
  const outNrm: number[] = [];
  const outUv: number[] = [];
  const indices: number[] = [];
  const lookup = new Map<string, number>();
  let faceCount = 0;

  const resolve = (token: string): number => {
    const known = lookup.get(token);
    if (known !== undefined) return known;
    const fields = token.split("/");
    const vi = parseInt(fields[0], 10) - 1;
    const ti = fields.length > 1 && fields[1] !== "" ? parseInt(fields[1], 10) - 1 : -1;
    const ni = fields.length > 2 && fields[2] !== "" ? parseInt(fields[2], 10) - 1 : -1;
    if (!(vi >= 0 && vi < pos.length)) {
      throw new ObjParseError(`face references missing vertex ${fields[0]}`);
    }
    const index = outPos.length / 3;
    outPos.push(...pos[vi]);
    outNrm.push(...(ni >= 0 && ni < nrm.length ? nrm[ni] : [0, 0, 1]));
    outUv.push(...(ti >= 0 && ti < uv.length ? uv[ti] : [0, 0]));
    lookup.set(token, index);
    return index;
  };

  for (const raw of text.split("\n")) {
    const line = raw.trim();
    if (line === "" || line.startsWith("#")) continue;
    const parts = line.split(/\s+/);
    switch (parts[0]) {
      case "v":
        pos.push([+parts[1], +parts[2], +parts[3]]);
        break;
      case "vn":
        nrm.push([+parts[1], +parts[2], +parts[3]]);
        break;
      case "vt":
        uv.push([+parts[1], +parts[2]]);
        break;
      case "f": {
        if (parts.length !== 4) {
          throw new ObjParseError("only triangle faces are supported");
        }
        indices.push(resolve(parts[1]), resolve(parts[2]), resolve(parts[3]));
        faceCount += 1;
        break;
      }
      default:
        break; // mtllib/usemtl/o/g/s are irrelevant here
    }
  }
  if (faceCount === 0) throw new ObjParseError("no faces in OBJ");
  return {
    positions: new Float32Array(outPos),
    normals: new Float32Array(outNrm),
    uvs: new Float32Array(outUv),
    indices: new Uint32Array(indices),
    vertexCount: outPos.length / 3,
    faceCount,
  };
}
