//! SVG rendering of one prediction window.

use std::fmt::Write;

use hst_core::model::GmmPrediction;
use hst_core::scene::Scene;

const SIZE: f64 = 800.0;
const MARGIN: f64 = 40.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"];

struct Frame {
    x0: f64,
    y0: f64,
    scale: f64,
}

impl Frame {
    fn px(&self, p: [f64; 2]) -> (f64, f64) {
        (MARGIN + (p[0] - self.x0) * self.scale, SIZE - MARGIN - (p[1] - self.y0) * self.scale)
    }
}

fn points(f: &Frame, ps: &[[f64; 2]]) -> String {
    let mut s = String::new();
    for (k, &p) in ps.iter().enumerate() {
        let (x, y) = f.px(p);
        if k > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{x:.2},{y:.2}");
    }
    s
}

/// History as solid lines, ground truth dashed, and every mode as dotted
/// points whose opacity falls with the prediction horizon. Coordinates are
/// in the scene frame.
pub fn render_svg(scene: &Scene, pred: &GmmPrediction) -> String {
    let cur = scene.current();
    let mut history: Vec<Vec<[f64; 2]>> = Vec::new();
    let mut truth: Vec<Vec<[f64; 2]>> = Vec::new();
    let mut all: Vec<[f64; 2]> = Vec::new();
    for (i, a) in scene.agents.iter().enumerate() {
        let h: Vec<[f64; 2]> = (0..=cur).filter(|&t| a.position_valid[t]).map(|t| a.position[t]).collect();
        let mut g: Vec<[f64; 2]> = a.last_observed(cur).map(|(_, p)| p).into_iter().collect();
        g.extend((0..scene.future_len).filter(|&t| scene.ground_truth.valid[i][t]).map(|t| scene.ground_truth.position[i][t]));
        all.extend(&h);
        all.extend(&g);
        history.push(h);
        truth.push(g);
    }
    for i in 0..pred.agents {
        for m in 0..pred.modes {
            for t in 0..pred.steps {
                all.push(pred.mean(i, t, m));
            }
        }
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in all.iter().filter(|p| p[0].is_finite() && p[1].is_finite()) {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    if !lo[0].is_finite() {
        lo = [-1.0, -1.0];
        hi = [1.0, 1.0];
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1.0);
    let f = Frame {
        x0: lo[0],
        y0: lo[1],
        scale: (SIZE - 2.0 * MARGIN) / span,
    };

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(
        s,
        r#"<title>{} from frame {}</title>"#,
        escape(&scene.scene_id),
        scene.window_start
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let weights = pred.weights();
    let steps = pred.steps.max(2) as f64;
    for (i, id) in scene.agent_ids.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, r#"<g id="agent-{}">"#, escape(id));
        if i < pred.agents {
            for m in 0..pred.modes {
                let _ = writeln!(s, r#"<g class="mode" data-mode="{m}" data-weight="{:.4}">"#, weights[m]);
                for t in 0..pred.steps {
                    let (x, y) = f.px(pred.mean(i, t, m));
                    let opacity = 0.9 * (1.0 - 0.8 * t as f64 / (steps - 1.0));
                    let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="2.5" fill="{color}" fill-opacity="{opacity:.3}"/>"#);
                }
                let _ = writeln!(s, "</g>");
            }
        }
        if truth[i].len() > 1 {
            let _ = writeln!(
                s,
                r#"<polyline class="truth" points="{}" fill="none" stroke="{color}" stroke-width="2" stroke-dasharray="6,4"/>"#,
                points(&f, &truth[i])
            );
        }
        if !history[i].is_empty() {
            let _ = writeln!(
                s,
                r#"<polyline class="history" points="{}" fill="none" stroke="{color}" stroke-width="2.5"/>"#,
                points(&f, &history[i])
            );
            let (x, y) = f.px(*history[i].last().unwrap());
            let _ = writeln!(s, r#"<circle class="current" cx="{x:.2}" cy="{y:.2}" r="4" fill="{color}"/>"#);
        }
        let _ = writeln!(s, "</g>");
    }
    let _ = writeln!(s, "</svg>");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
