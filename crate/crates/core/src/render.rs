//! SVG overlays of detections on frame images.

use std::fmt::Write as _;

use crate::geometry::{iou, BBox};

/// Which pass produced a box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoxOrigin {
    /// Kept from the original detector pass; drawn gray.
    Original,
    /// Introduced by region re-detection; drawn red.
    Refined,
}

impl BoxOrigin {
    fn stroke(self) -> (&'static str, &'static str) {
        match self {
            BoxOrigin::Original => ("#808080", "original"),
            BoxOrigin::Refined => ("#e02020", "refined"),
        }
    }
}

/// IoU at or above which a fused box is attributed to an original detection.
pub const SAME_BOX_IOU: f64 = 0.999;

/// Attributes each box to the original pass when it coincides with one of
/// `original`, otherwise to the refinement pass.
pub fn classify(boxes: &[BBox], original: &[BBox]) -> Vec<(BBox, BoxOrigin)> {
    boxes
        .iter()
        .map(|b| {
            let kept = original.iter().any(|o| iou(b, o) >= SAME_BOX_IOU);
            (*b, if kept { BoxOrigin::Original } else { BoxOrigin::Refined })
        })
        .collect()
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(c),
        }
    }
    out
}

/// An SVG document of the given size: the image (when given) followed by one
/// `rect` per box. The viewport clips anything outside the frame.
pub fn render_svg(width: u32, height: u32, image_href: Option<&str>, boxes: &[(BBox, BoxOrigin)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" width="{width}" height="{height}" viewBox="0 0 {width} {height}" overflow="hidden">"#
    );
    if let Some(href) = image_href {
        let href = escape(href);
        let _ = writeln!(
            s,
            r#"  <image x="0" y="0" width="{width}" height="{height}" href="{href}" xlink:href="{href}"/>"#
        );
    }
    for (b, origin) in boxes {
        let (color, class) = origin.stroke();
        let score = b.score.map(|v| format!(r#" data-score="{v}""#)).unwrap_or_default();
        let _ = writeln!(
            s,
            r#"  <rect class="{class}" x="{}" y="{}" width="{}" height="{}" fill="none" stroke="{color}" stroke-width="2"{score}/>"#,
            b.x, b.y, b.w, b.h
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_rect_per_box() {
        let boxes = [
            (BBox::new(1., 2., 3., 4.).unwrap(), BoxOrigin::Original),
            (BBox::scored(5., 6., 7., 8., 0.5).unwrap(), BoxOrigin::Refined),
        ];
        let svg = render_svg(100, 50, Some("a&b.png"), &boxes);
        assert_eq!(svg.matches("<rect").count(), 2);
        assert!(svg.contains(r#"href="a&amp;b.png""#));
        assert!(svg.contains(r##"class="original" x="1" y="2" width="3" height="4" fill="none" stroke="#808080""##));
        assert!(svg.contains(r#"data-score="0.5""#));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn empty_frame_has_only_the_image() {
        let svg = render_svg(10, 10, Some("f.png"), &[]);
        assert!(svg.contains("<image") && !svg.contains("<rect"));
    }

    #[test]
    fn outside_boxes_are_clipped_by_the_viewport() {
        let svg = render_svg(10, 10, None, &[(BBox::new(-5., -5., 30., 8.).unwrap(), BoxOrigin::Refined)]);
        assert!(svg.contains(r#"viewBox="0 0 10 10" overflow="hidden""#));
        assert!(svg.contains(r#"x="-5""#));
    }

    #[test]
    fn classification() {
        let o = BBox::scored(0., 0., 10., 10., 0.9).unwrap();
        let f = BBox::scored(50., 0., 10., 10., 0.8).unwrap();
        let c = classify(&[o, f], &[o.with_score(Some(0.1))]);
        assert_eq!(c[0].1, BoxOrigin::Original);
        assert_eq!(c[1].1, BoxOrigin::Refined);
    }
}
