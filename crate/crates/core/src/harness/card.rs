//! Architecture cards: one `layer <l> k=<k> mask=<hex>` line per layer.
//! Lines starting with `#` are comments.

use crate::archspace::LayerMask;
use crate::error::{Error, Result};

pub fn render_card(masks: &[LayerMask], header: &[String]) -> String {
    let mut out = String::new();
    for h in header {
        out.push_str("# ");
        out.push_str(h);
        out.push('\n');
    }
    for m in masks {
        out.push_str(&format!("layer {} k={} mask={}\n", m.layer(), m.k(), m.to_hex()));
    }
    out
}

/// Parses a card against the SuperNet's layer widths.
pub fn parse_card(text: &str, widths: &[usize]) -> Result<Vec<LayerMask>> {
    let mut masks: Vec<LayerMask> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |m: &str| Error::Input(format!("card line {}: {m}", lineno + 1));
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [tag, l, k, mask] = parts[..] else {
            return Err(err("expected `layer <l> k=<k> mask=<hex>`"));
        };
        if tag != "layer" {
            return Err(err("expected `layer`"));
        }
        let l: usize = l.parse().map_err(|_| err("bad layer index"))?;
        let k: usize = k
            .strip_prefix("k=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| err("bad k"))?;
        let hex = mask.strip_prefix("mask=").ok_or_else(|| err("bad mask"))?;
        if l != masks.len() {
            return Err(err("layers must appear in order"));
        }
        let width = *widths.get(l).ok_or_else(|| err("more layers than the network has"))?;
        let m = LayerMask::from_hex(l, width, hex)?;
        if m.k() != k {
            return Err(err(&format!("k={k} but mask retains {}", m.k())));
        }
        masks.push(m);
    }
    if masks.len() != widths.len() {
        return Err(Error::Input(format!("card has {} layers, network has {}", masks.len(), widths.len())));
    }
    Ok(masks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn card_round_trip() {
        let masks = vec![
            LayerMask::from_indices(0, 6, &[0, 5]).unwrap(),
            LayerMask::ones(1, 4),
        ];
        let text = render_card(&masks, &["constraint 0.5".into()]);
        assert!(text.contains("layer 0 k=2 mask=21"));
        assert_eq!(parse_card(&text, &[6, 4]).unwrap(), masks);
        assert!(parse_card("layer 0 k=3 mask=21\nlayer 1 k=4 mask=f\n", &[6, 4]).is_err());
    }
}
