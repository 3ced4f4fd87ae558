//! Static SVG rendering of an instance and an optional closed route.

use std::fmt::Write as _;
use std::path::Path;

use cetsp::geometry::Point;
use cetsp::instance::Instance;

const SIZE: f64 = 1000.0;
const MARGIN: f64 = 50.0;

fn map(p: Point) -> (f64, f64) {
    let s = SIZE - 2.0 * MARGIN;
    (MARGIN + s * p.x, SIZE - MARGIN - s * p.y)
}

/// SVG text for `inst` (expected in the unit square). `route` lists the
/// waypoints in visiting order starting at the depot; the closing edge back
/// to the first waypoint is drawn.
pub fn svg_string(inst: &Instance, route: Option<&[Point]>) -> String {
    let scale = SIZE - 2.0 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r##"<rect x="0" y="0" width="{SIZE}" height="{SIZE}" fill="#ffffff"/>"##);
    for d in &inst.targets {
        let (x, y) = map(d.center);
        let _ = writeln!(
            s,
            r##"<circle cx="{x:.3}" cy="{y:.3}" r="{:.3}" fill="#4a90d9" fill-opacity="0.2" stroke="#4a90d9"/>"##,
            d.radius * scale
        );
    }
    if let Some(route) = route.filter(|r| !r.is_empty()) {
        let mut pts = String::new();
        for p in route.iter().chain(std::iter::once(&route[0])) {
            let (x, y) = map(*p);
            let _ = write!(pts, "{}{x:.3},{y:.3}", if pts.is_empty() { "" } else { " " });
        }
        let _ = writeln!(s, r##"<polyline points="{pts}" fill="none" stroke="#d0021b" stroke-width="2"/>"##);
    }
    let (dx, dy) = map(inst.depot);
    let _ = writeln!(s, r##"<rect x="{:.3}" y="{:.3}" width="12" height="12" fill="#000000"/>"##, dx - 6.0, dy - 6.0);
    s.push_str("</svg>\n");
    s
}

pub fn render_svg(inst: &Instance, route: Option<&[Point]>, path: &Path) -> std::io::Result<()> {
    std::fs::write(path, svg_string(inst, route))
}
