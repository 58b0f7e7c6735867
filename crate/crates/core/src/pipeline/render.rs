//! Arrow-map rendering of policies and options.

use std::fmt::Write as _;

use crate::expert::{argmax_lowest, ActionDist};
use crate::gridworld::{Action, Cell, GridMap, StateId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderFormat {
    Ascii,
    Svg,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Overlay<'a> {
    pub goal: Option<StateId>,
    /// Per-state termination probability, drawn as cell shading in SVG.
    pub termination: Option<&'a [f64]>,
}

pub fn render_policy(map: &GridMap, policy: &[ActionDist], format: RenderFormat, overlay: Overlay<'_>) -> String {
    match format {
        RenderFormat::Ascii => render_ascii(map, policy, overlay.goal),
        RenderFormat::Svg => render_svg(map, policy, overlay),
    }
}

/// One character per cell: walls `#`, goal `G`, otherwise the argmax arrow
/// (ties resolve to the lowest action index).
pub fn render_ascii(map: &GridMap, policy: &[ActionDist], goal: Option<StateId>) -> String {
    let mut out = String::with_capacity((map.width() + 1) * map.height());
    for r in 0..map.height() {
        for c in 0..map.width() {
            let ch = match map.state_at((r, c)) {
                None => '#',
                Some(s) if Some(s) == goal => 'G',
                Some(s) => Action::ALL[argmax_lowest(&policy[s.0])].arrow(),
            };
            out.push(ch);
        }
        out.push('\n');
    }
    out
}

const CELL: f64 = 24.0;

pub fn render_svg(map: &GridMap, policy: &[ActionDist], overlay: Overlay<'_>) -> String {
    let (w, h) = (map.width() as f64 * CELL, map.height() as f64 * CELL);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(out, r#"<title>{}</title>"#, escape(map.name()));
    for r in 0..map.height() {
        for c in 0..map.width() {
            let (x, y) = (c as f64 * CELL, r as f64 * CELL);
            if map.cell((r, c)) == Some(Cell::Wall) {
                let _ = writeln!(out, r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="#333"/>"##);
                continue;
            }
            let s = map.state_at((r, c)).expect("free cell");
            let shade = overlay.termination.map_or(0.0, |t| t[s.0].clamp(0.0, 1.0));
            let _ = writeln!(
                out,
                r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="#d62728" fill-opacity="{shade:.3}" stroke="#ccc" stroke-width="0.5"/>"##
            );
            if Some(s) == overlay.goal {
                let _ = writeln!(
                    out,
                    r##"<text x="{}" y="{}" font-size="14" text-anchor="middle" fill="#2ca02c">G</text>"##,
                    x + CELL / 2.0,
                    y + CELL * 0.7
                );
                continue;
            }
            let (cx, cy) = (x + CELL / 2.0, y + CELL / 2.0);
            for a in Action::ALL {
                let p = policy[s.0][a.index()];
                if p < 0.01 {
                    continue;
                }
                let len = 0.45 * CELL * p;
                let (dx, dy) = match a {
                    Action::North => (0.0, -len),
                    Action::East => (len, 0.0),
                    Action::South => (0.0, len),
                    Action::West => (-len, 0.0),
                };
                let _ = writeln!(
                    out,
                    r##"<line x1="{cx}" y1="{cy}" x2="{:.2}" y2="{:.2}" stroke="#1f77b4" stroke-width="{:.2}" stroke-linecap="round"/>"##,
                    cx + dx,
                    cy + dy,
                    1.0 + 2.0 * p
                );
            }
        }
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
