// City map: procedurally drawn vector background (graticule over the
// deployment bounding box) plus one marker per fixed resource. Fully
// offline; no tile service involved. Mobile-tagged resources appear in the
// side list instead (they have no fixed position).

import type { ResourceDoc } from "./types.js";

export interface MapHandle {
  svg: SVGSVGElement;
  markerCount: number;
  setSelected(urns: Set<string>): void;
}

const ROLE_COLORS: Record<string, string> = {
  experimentation: "#5aa7ff",
  "service-only": "#eec643",
  infrastructural: "#9b59b6",
  participatory: "#2bbf6a",
};

const SVG_NS = "http://www.w3.org/2000/svg";

export function renderMap(
  container: HTMLElement,
  resources: ResourceDoc[],
  onToggle?: (urn: string) => void,
): MapHandle {
  const fixed = resources.filter((r) => r.position !== "mobile");
  const lats = fixed.map((r) => (r.position as { lat: number }).lat);
  const lons = fixed.map((r) => (r.position as { lon: number }).lon);
  const pad = 0.0008;
  const minLat = Math.min(...lats, 43.46) - pad;
  const maxLat = Math.max(...lats, 43.463) + pad;
  const minLon = Math.min(...lons, -3.81) - pad;
  const maxLon = Math.max(...lons, -3.807) + pad;
  const width = 920;
  const height = 560;
  const x = (lon: number) => ((lon - minLon) / (maxLon - minLon)) * width;
  const y = (lat: number) => height - ((lat - minLat) / (maxLat - minLat)) * height;

  const svg = document.createElementNS(SVG_NS, "svg") as SVGSVGElement;
  svg.setAttribute("viewBox", `0 0 ${width} ${height}`);
  svg.setAttribute("class", "city-map");

  // graticule background
  const grid = document.createElementNS(SVG_NS, "g");
  grid.setAttribute("class", "graticule");
  const step = 0.002;
  for (let lat = Math.floor(minLat / step) * step; lat <= maxLat; lat += step) {
    const line = document.createElementNS(SVG_NS, "line");
    line.setAttribute("x1", "0");
    line.setAttribute("x2", String(width));
    line.setAttribute("y1", String(y(lat)));
    line.setAttribute("y2", String(y(lat)));
    grid.appendChild(line);
  }
  for (let lon = Math.floor(minLon / step) * step; lon <= maxLon; lon += step) {
    const line = document.createElementNS(SVG_NS, "line");
    line.setAttribute("y1", "0");
    line.setAttribute("y2", String(height));
    line.setAttribute("x1", String(x(lon)));
    line.setAttribute("x2", String(x(lon)));
    grid.appendChild(line);
  }
  svg.appendChild(grid);

  const markers = new Map<string, SVGCircleElement>();
  for (const doc of fixed) {
    const pos = doc.position as { lat: number; lon: number };
    const dot = document.createElementNS(SVG_NS, "circle") as SVGCircleElement;
    dot.setAttribute("cx", String(x(pos.lon)));
    dot.setAttribute("cy", String(y(pos.lat)));
    dot.setAttribute("r", doc["hw-meta"]["kind"] === "gateway" ? "7" : "4");
    dot.setAttribute("fill", ROLE_COLORS[doc.role] ?? "#ccc");
    dot.setAttribute("class", `marker state-${doc.state}`);
    dot.setAttribute("data-urn", doc.urn);
    const title = document.createElementNS(SVG_NS, "title");
    title.textContent = `${doc.urn} (${doc.role}, ${doc.state})`;
    dot.appendChild(title);
    if (onToggle) {
      dot.addEventListener("click", () => onToggle(doc.urn));
    }
    svg.appendChild(dot);
    markers.set(doc.urn, dot);
  }

  container.replaceChildren(svg);
  return {
    svg,
    markerCount: markers.size,
    setSelected(urns: Set<string>) {
      for (const [urn, dot] of markers) {
        dot.classList.toggle("selected", urns.has(urn));
      }
    },
  };
}
