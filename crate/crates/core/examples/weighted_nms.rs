//! Fuses overlapping detections from three models of different weight.

use vrdet::bbox::BoundingBox;
use vrdet::ensemble::{weighted_nms, ModelOutput, NmsConfig};
use vrdet::types::{ClassId, Detection};

fn det(x0: f64, y0: f64, x1: f64, y1: f64, confidence: f64) -> anyhow::Result<Detection> {
    Ok(Detection::new("img", ClassId(0), BoundingBox::new(x0, y0, x1, y1)?, confidence))
}

fn main() -> anyhow::Result<()> {
    let outputs = vec![
        ModelOutput {
            model_id: "resnet".into(),
            weight: 2.0,
            detections: vec![det(0.10, 0.10, 0.40, 0.40, 0.9)?, det(0.60, 0.60, 0.90, 0.90, 0.3)?],
        },
        ModelOutput {
            model_id: "inception".into(),
            weight: 1.0,
            detections: vec![det(0.12, 0.11, 0.42, 0.41, 0.7)?],
        },
        ModelOutput {
            model_id: "mobilenet".into(),
            weight: 1.0,
            detections: vec![det(0.08, 0.09, 0.38, 0.40, 0.5)?, det(0.62, 0.61, 0.91, 0.92, 0.4)?],
        },
    ];
    for d in weighted_nms(&outputs, &NmsConfig::default())? {
        let [x0, y0, x1, y1] = d.bbox.to_array();
        println!("conf {:.3}  box ({x0:.4}, {y0:.4}, {x1:.4}, {y1:.4})", d.confidence);
    }
    Ok(())
}
