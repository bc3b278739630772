import type { CellView } from "./types.js";
import type { CellStatus } from "./store.js";

// Renders the flat-top hex grid as an SVG string. Cell centers come from the
// axial coordinates the gateway reports, so the picture matches the grid the
// platform actually assigned readings to.

const SQRT3 = Math.sqrt(3);

export type MapCell = {
  view: CellView;
  status: CellStatus;
};

export type MapOptions = {
  width?: number;
  height?: number;
  selected?: string | null;
};

/** Planar center of a flat-top axial cell, in meters, y growing north. */
export function cellCenterMeters(q: number, r: number,
                                 circumradiusM: number): { x: number; y: number } {
  return {
    x: circumradiusM * 1.5 * q,
    y: circumradiusM * SQRT3 * (r + q / 2),
  };
}

/** The six corners of a flat-top hexagon around (cx, cy). */
export function hexCorners(cx: number, cy: number,
                           radius: number): Array<[number, number]> {
  const corners: Array<[number, number]> = [];
  for (let i = 0; i < 6; i += 1) {
    const angle = (Math.PI / 3) * i;
    corners.push([cx + radius * Math.cos(angle), cy + radius * Math.sin(angle)]);
  }
  return corners;
}

function escapeAttr(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function renderCellMap(cells: MapCell[], options: MapOptions = {}): string {
  const width = options.width ?? 640;
  const height = options.height ?? 440;
  const open = `<svg class="hexmap" viewBox="0 0 ${width} ${height}" `
    + `width="${width}" height="${height}" role="img">`;
  if (cells.length === 0) {
    return `${open}<text x="${width / 2}" y="${height / 2}" `
      + `class="map-empty" text-anchor="middle">no cells yet</text></svg>`;
  }

  const radius = cells[0]!.view.hex_circumradius_m;
  // screen y grows south, the axial frame grows north
  const centers = cells.map(({ view }) => {
    const c = cellCenterMeters(view.q, view.r, radius);
    return { x: c.x, y: -c.y };
  });
  const minX = Math.min(...centers.map((c) => c.x)) - radius;
  const maxX = Math.max(...centers.map((c) => c.x)) + radius;
  const minY = Math.min(...centers.map((c) => c.y)) - radius;
  const maxY = Math.max(...centers.map((c) => c.y)) + radius;
  const scale = Math.min(width / (maxX - minX), height / (maxY - minY));
  const padX = (width - (maxX - minX) * scale) / 2;
  const padY = (height - (maxY - minY) * scale) / 2;

  const polygons = cells.map(({ view, status }, i) => {
    const center = centers[i]!;
    // slight shrink keeps a visible seam between neighbouring cells
    const points = hexCorners(center.x, center.y, radius * 0.96)
      .map(([x, y]) => {
        const sx = (x - minX) * scale + padX;
        const sy = (y - minY) * scale + padY;
        return `${sx.toFixed(1)},${sy.toFixed(1)}`;
      })
      .join(" ");
    const classes = ["hex", status];
    if (options.selected === view.cell) classes.push("selected");
    const cell = escapeAttr(view.cell);
    const avg = view.rolling_average === null
      ? "warming up" : `avg ${view.rolling_average.toFixed(3)}`;
    const title = `${cell}: ${view.sensors} sensors, ${avg}, `
      + `${view.alerts_total} alerts`;
    return `<polygon points="${points}" class="${classes.join(" ")}" `
      + `data-cell="${cell}"><title>${escapeAttr(title)}</title></polygon>`;
  });

  return `${open}${polygons.join("")}</svg>`;
}
