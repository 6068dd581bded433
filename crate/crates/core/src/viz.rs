//! Event-roll SVG: one lane per class, reference bars above predicted bars.

use std::fmt::Write as _;
use std::path::Path;

use crate::annotation::EventAnnotation;
use crate::error::{Error, Result};
use crate::vocab::TechniqueVocabulary;

pub const DEFAULT_PX_PER_SECOND: f64 = 100.0;

const LABEL_WIDTH: f64 = 140.0;
const HEADER: f64 = 40.0;
const LANE_HEIGHT: f64 = 40.0;
const BAR_HEIGHT: f64 = 14.0;
const REF_Y: f64 = 5.0;
const PRED_Y: f64 = 21.0;
const FOOTER: f64 = 30.0;

const PALETTE: [&str; 12] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf", "#393b79", "#637939",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn tick_step(duration: f64) -> f64 {
    [1.0, 2.0, 5.0, 10.0, 30.0, 60.0]
        .into_iter()
        .find(|s| duration / s <= 20.0)
        .unwrap_or(120.0)
}

/// Renders the event roll. Bars sit inside a translated plot group, so an event
/// starting at `t` seconds has `x = t * px_per_second`.
pub fn render_event_roll(
    reference: &EventAnnotation,
    predicted: &EventAnnotation,
    duration: f64,
    vocabulary: &TechniqueVocabulary,
    px_per_second: f64,
) -> Result<String> {
    if !(duration > 0.0) || !(px_per_second > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "duration {duration} s at {px_per_second} px/s"
        )));
    }
    let k = vocabulary.len();
    for e in reference.events().iter().chain(predicted.events()) {
        if e.label >= k {
            return Err(Error::InvalidAnnotation(format!("label {} outside vocabulary", e.label)));
        }
    }
    let plot_w = duration * px_per_second;
    let plot_h = k as f64 * LANE_HEIGHT;
    let width = LABEL_WIDTH + plot_w + 20.0;
    let height = HEADER + plot_h + FOOTER;

    let mut svg = String::new();
    let w = &mut svg;
    // writes into a String cannot fail
    let _ = writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        w,
        r##"<g class="legend"><text x="{LABEL_WIDTH}" y="16" fill="#000">upper bar: reference</text><text x="{}" y="16" fill="#555">lower bar: predicted</text></g>"##,
        LABEL_WIDTH + 160.0
    );
    let _ = writeln!(w, r#"<g class="plot" transform="translate({LABEL_WIDTH},{HEADER})">"#);

    for (c, label) in vocabulary.labels().iter().enumerate() {
        let y = c as f64 * LANE_HEIGHT;
        let _ = writeln!(
            w,
            r##"<text class="lane-label" x="-8" y="{}" text-anchor="end" fill="{}">{}</text>"##,
            y + LANE_HEIGHT / 2.0 + 4.0,
            PALETTE[c % PALETTE.len()],
            escape(label)
        );
        let _ = writeln!(
            w,
            r##"<line x1="0" y1="{y}" x2="{plot_w}" y2="{y}" stroke="#ddd"/>"##
        );
    }
    let _ = writeln!(
        w,
        r##"<line x1="0" y1="{plot_h}" x2="{plot_w}" y2="{plot_h}" stroke="#999"/>"##
    );

    let step = tick_step(duration);
    let mut t = 0.0;
    while t <= duration + 1e-9 {
        let x = t * px_per_second;
        let _ = writeln!(
            w,
            r##"<line class="tick" x1="{x}" y1="{plot_h}" x2="{x}" y2="{}" stroke="#999"/><text x="{x}" y="{}" text-anchor="middle">{t}s</text>"##,
            plot_h + 5.0,
            plot_h + 18.0
        );
        t += step;
    }

    for (class, annotation, dy, opacity) in [("reference", reference, REF_Y, 1.0), ("predicted", predicted, PRED_Y, 0.6)] {
        for e in annotation.events() {
            let _ = writeln!(
                w,
                r#"<rect class="event {class}" x="{}" y="{}" width="{}" height="{BAR_HEIGHT}" fill="{}" fill-opacity="{opacity}"><title>{} {:.3}-{:.3}s</title></rect>"#,
                e.onset * px_per_second,
                e.label as f64 * LANE_HEIGHT + dy,
                (e.offset - e.onset) * px_per_second,
                PALETTE[e.label % PALETTE.len()],
                escape(vocabulary.label(e.label).unwrap_or("?")),
                e.onset,
                e.offset
            );
        }
    }
    svg.push_str("</g>\n</svg>\n");
    Ok(svg)
}

pub fn write_event_roll(
    reference: &EventAnnotation,
    predicted: &EventAnnotation,
    duration: f64,
    vocabulary: &TechniqueVocabulary,
    px_per_second: f64,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let svg = render_event_roll(reference, predicted, duration, vocabulary, px_per_second)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}
