//! Minimal SVG writer for scene overlays: ground truth as rings, predictions
//! as filled discs, matched pairs connected by a line. One SVG unit is one
//! scene pixel.

use nucdet::synth::{NucleusInstance, Scene, SceneConfig};

const SCALE: usize = 6;

fn hex(color: [f64; 3]) -> String {
    let c = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    format!("#{:02x}{:02x}{:02x}", c(color[0]), c(color[1]), c(color[2]))
}

fn class_color(cfg: &SceneConfig, class_id: usize) -> String {
    cfg.class_colors
        .get(class_id - 1)
        .map(|&c| hex(c))
        .unwrap_or_else(|| "#555555".to_string())
}

/// Renders one scene. `matches` pairs prediction indices with ground-truth
/// indices (the detection-level matching).
pub fn render_scene(
    scene: &Scene,
    preds: &[NucleusInstance],
    matches: &[(usize, usize)],
    cfg: &SceneConfig,
    radius: f64,
) -> String {
    let (w, h) = (cfg.width, cfg.height);
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {w} {h}\">\n",
        w * SCALE,
        h * SCALE
    ));
    svg.push_str(&format!(
        "  <rect width=\"{w}\" height=\"{h}\" fill=\"#f2ece4\"/>\n"
    ));

    // links underneath the markers
    for &(pi, gi) in matches {
        let p = &preds[pi];
        let g = &scene.instances[gi];
        svg.push_str(&format!(
            "  <line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#888888\" stroke-width=\"0.3\"/>\n",
            p.x, p.y, g.x, g.y
        ));
    }
    for inst in &scene.instances {
        svg.push_str(&format!(
            "  <circle class=\"gt\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"{:.2}\" fill=\"none\" stroke=\"{}\" stroke-width=\"0.6\"/>\n",
            inst.x,
            inst.y,
            radius,
            class_color(cfg, inst.class_id)
        ));
    }
    for p in preds {
        svg.push_str(&format!(
            "  <circle class=\"pred\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.4\" fill=\"{}\" stroke=\"#222222\" stroke-width=\"0.2\"/>\n",
            p.x,
            p.y,
            class_color(cfg, p.class_id)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use nucdet::tensor::DTensor;

    fn scene_with(instances: Vec<NucleusInstance>) -> (Scene, SceneConfig) {
        let cfg = SceneConfig::default();
        let image = DTensor::new(
            vec![cfg.height, cfg.width, 3],
            vec![0.5; cfg.height * cfg.width * 3],
        )
        .unwrap();
        (
            Scene {
                id: 0,
                image,
                instances,
            },
            cfg,
        )
    }

    #[test]
    fn empty_scene_is_background_only() {
        let (scene, cfg) = scene_with(Vec::new());
        let doc = render_scene(&scene, &[], &[], &cfg, 6.0);
        assert!(doc.starts_with("<svg "));
        assert!(doc.contains("<rect "));
        assert!(!doc.contains("<circle"));
        assert!(doc.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn one_ring_per_annotation() {
        let (scene, cfg) = scene_with(vec![
            NucleusInstance::new(10.0, 12.0, 1),
            NucleusInstance::new(30.0, 40.0, 2),
            NucleusInstance::new(50.0, 20.0, 3),
        ]);
        let doc = render_scene(&scene, &[], &[], &cfg, 6.0);
        assert_eq!(doc.matches("class=\"gt\"").count(), 3);
        assert_eq!(doc.matches("class=\"pred\"").count(), 0);
    }

    #[test]
    fn matches_draw_links() {
        let (scene, cfg) = scene_with(vec![NucleusInstance::new(10.0, 12.0, 1)]);
        let preds = vec![NucleusInstance {
            x: 11.0,
            y: 12.5,
            class_id: 1,
            score: Some(0.9),
        }];
        let doc = render_scene(&scene, &preds, &[(0, 0)], &cfg, 6.0);
        assert_eq!(doc.matches("<line ").count(), 1);
        assert_eq!(doc.matches("class=\"pred\"").count(), 1);
    }

    #[test]
    fn colors_are_hex_encoded() {
        assert_eq!(hex([1.0, 0.0, 0.5]), "#ff0080");
        assert_eq!(hex([0.0, 0.0, 0.0]), "#000000");
    }
}
