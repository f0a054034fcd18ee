//! Multiply-accumulate accounting for dense versus gated execution.
//!
//! Counting rule: a convolution costs 2*H*W*C_in*C_out*kh*kw FLOPs
//! (one multiply-accumulate = 2 FLOPs); a gated convolution scales by the
//! active-pixel fraction of its mask. Elementwise and normalization costs
//! are ignored as conv-dominated.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::gating::GateMask;

/// Cost-relevant description of one convolution layer.
#[derive(Clone, Debug)]
pub struct ConvCost {
    pub name: String,
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub height: usize,
    pub width: usize,
    /// Name of the mask gating this layer, if any.
    pub gated_by: Option<String>,
}

impl ConvCost {
    pub fn dense_flops(&self) -> f64 {
        2.0 * (self.height * self.width * self.in_channels * self.out_channels * self.kh * self.kw)
            as f64
    }
}

/// Network description for FLOP accounting.
#[derive(Clone, Debug, Default)]
pub struct NetworkCost {
    pub layers: Vec<ConvCost>,
}

impl NetworkCost {
    pub fn push(
        &mut self,
        name: impl Into<String>,
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        height: usize,
        width: usize,
        gated_by: Option<String>,
    ) {
        self.layers.push(ConvCost {
            name: name.into(),
            out_channels,
            in_channels,
            kh,
            kw,
            height,
            width,
            gated_by,
        });
    }
}

#[derive(Clone, Debug)]
pub struct LayerFlops {
    pub name: String,
    pub dense: f64,
    pub gated: f64,
}

/// Per-layer and total multiply-accumulate counts for dense vs. gated
/// execution, plus the budget parameter when one applies.
#[derive(Clone, Debug)]
pub struct FlopReport {
    pub layers: Vec<LayerFlops>,
    pub dense_total: f64,
    pub gated_total: f64,
    pub rho: Option<f64>,
}

impl FlopReport {
    pub fn ratio(&self) -> f64 {
        if self.dense_total == 0.0 {
            1.0
        } else {
            self.gated_total / self.dense_total
        }
    }
}

/// Count FLOPs with concrete masks attached to the gated layers.
pub fn count_flops(
    net: &NetworkCost,
    masks: &BTreeMap<String, GateMask>,
    rho: Option<f64>,
) -> Result<FlopReport> {
    let densities: BTreeMap<String, f64> = masks
        .iter()
        .map(|(name, mask)| (name.clone(), mask.density()))
        .collect();
    count_flops_with_densities(net, &densities, rho)
}

/// Count FLOPs from per-mask densities directly; used both by evaluation
/// (measured densities) and for predicting the ratio a budget rho implies.
pub fn count_flops_with_densities(
    net: &NetworkCost,
    densities: &BTreeMap<String, f64>,
    rho: Option<f64>,
) -> Result<FlopReport> {
    let mut layers = Vec::with_capacity(net.layers.len());
    let mut dense_total = 0.0;
    let mut gated_total = 0.0;
    for layer in &net.layers {
        let dense = layer.dense_flops();
        let gated = match &layer.gated_by {
            None => dense,
            Some(mask_name) => {
                let d = densities.get(mask_name).ok_or_else(|| {
                    Error::InvalidArg(format!(
                        "no mask named '{mask_name}' for gated layer '{}'",
                        layer.name
                    ))
                })?;
                if !(0.0..=1.0).contains(d) {
                    return Err(Error::InvalidArg(format!(
                        "density {d} for mask '{mask_name}' outside [0, 1]"
                    )));
                }
                dense * d
            }
        };
        dense_total += dense;
        gated_total += gated;
        layers.push(LayerFlops { name: layer.name.clone(), dense, gated });
    }
    Ok(FlopReport { layers, dense_total, gated_total, rho })
}

/// Ratio the budget parameter predicts when every gated layer runs at
/// exactly density `rho`.
pub fn predicted_ratio(net: &NetworkCost, rho: f64) -> Result<f64> {
    let densities: BTreeMap<String, f64> = net
        .layers
        .iter()
        .filter_map(|l| l.gated_by.clone())
        .map(|name| (name, rho))
        .collect();
    Ok(count_flops_with_densities(net, &densities, Some(rho))?.ratio())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn toy_two_block_net() -> NetworkCost {
        // Hand-evaluated 2-block toy net at 4x4 spatial size, 4 channels,
        // bottleneck 2. Gate heads and reductions stay dense.
        let mut net = NetworkCost::default();
        for b in 0..2 {
            net.push(format!("block{b}.reduce"), 2, 4, 1, 1, 4, 4, None);
            net.push(format!("block{b}.gate"), 2, 4, 1, 1, 4, 4, None);
            net.push(
                format!("block{b}.spatial"),
                2,
                2,
                3,
                3,
                4,
                4,
                Some(format!("block{b}.mask")),
            );
            net.push(
                format!("block{b}.expand"),
                4,
                2,
                1,
                1,
                4,
                4,
                Some(format!("block{b}.mask")),
            );
        }
        net
    }

    fn mask_of_density(d: f64) -> GateMask {
        let active = (d * 16.0).round() as usize;
        let t = Tensor::from_fn(&[4, 4], |i| if i < active { 1.0 } else { 0.0 }).unwrap();
        GateMask::from_tensor(t).unwrap()
    }

    #[test]
    fn all_ones_masks_give_ratio_one() {
        let net = toy_two_block_net();
        let mut masks = BTreeMap::new();
        masks.insert("block0.mask".to_string(), mask_of_density(1.0));
        masks.insert("block1.mask".to_string(), mask_of_density(1.0));
        let report = count_flops(&net, &masks, Some(1.0)).unwrap();
        assert_eq!(report.ratio(), 1.0);
        assert_eq!(report.dense_total, report.gated_total);
    }

    #[test]
    fn hand_computed_partial_density_ratio() {
        let net = toy_two_block_net();
        // Per block: reduce 2*16*4*2 = 256 MACs -> 512 FLOPs; gate 512;
        // spatial 2*16*2*2*9 = 1152 MACs -> 2304; expand 512.
        // Dense per block = 512 + 512 + 2304 + 512... careful: counts below
        // are FLOPs already (2 * MACs).
        let reduce = 2.0 * (16 * 4 * 2) as f64;
        let gate = 2.0 * (16 * 4 * 2) as f64;
        let spatial = 2.0 * (16 * 2 * 2 * 9) as f64;
        let expand = 2.0 * (16 * 2 * 4) as f64;
        let dense_total = 2.0 * (reduce + gate + spatial + expand);

        let g = 0.5;
        let mut masks = BTreeMap::new();
        masks.insert("block0.mask".to_string(), mask_of_density(g));
        masks.insert("block1.mask".to_string(), mask_of_density(g));
        let report = count_flops(&net, &masks, Some(g)).unwrap();
        let want_gated = 2.0 * (reduce + gate + g * (spatial + expand));
        assert!((report.dense_total - dense_total).abs() < 1e-9);
        assert!((report.gated_total - want_gated).abs() < 1e-9);
        assert!((report.ratio() - want_gated / dense_total).abs() < 1e-12);
    }

    #[test]
    fn truncating_half_a_homogeneous_stack_halves_the_total() {
        let mut full = NetworkCost::default();
        let mut half = NetworkCost::default();
        for b in 0..4 {
            full.push(format!("b{b}"), 8, 8, 3, 3, 8, 8, None);
            if b < 2 {
                half.push(format!("b{b}"), 8, 8, 3, 3, 8, 8, None);
            }
        }
        let empty = BTreeMap::new();
        let full_r = count_flops(&full, &empty, None).unwrap();
        let half_r = count_flops(&half, &empty, None).unwrap();
        assert!((half_r.dense_total * 2.0 - full_r.dense_total).abs() < 1e-9);
    }

    #[test]
    fn missing_mask_for_gated_layer_is_an_error() {
        let net = toy_two_block_net();
        let masks = BTreeMap::new();
        assert!(count_flops(&net, &masks, None).is_err());
    }

    #[test]
    fn adding_an_active_pixel_never_decreases_the_total() {
        let net = toy_two_block_net();
        let mut masks = BTreeMap::new();
        masks.insert("block0.mask".to_string(), mask_of_density(0.25));
        masks.insert("block1.mask".to_string(), mask_of_density(0.5));
        let base = count_flops(&net, &masks, None).unwrap().gated_total;
        for name in ["block0.mask", "block1.mask"] {
            let mut t = masks[name].as_tensor().clone();
            let off = t.data().iter().position(|&v| v == 0.0).unwrap();
            t.data_mut()[off] = 1.0;
            let mut bumped = masks.clone();
            bumped.insert(name.to_string(), GateMask::from_tensor(t).unwrap());
            let total = count_flops(&net, &bumped, None).unwrap().gated_total;
            assert!(total >= base);
        }
    }

    #[test]
    fn predicted_ratio_interpolates_gated_fraction() {
        let net = toy_two_block_net();
        let r1 = predicted_ratio(&net, 1.0).unwrap();
        assert!((r1 - 1.0).abs() < 1e-12);
        let r0 = predicted_ratio(&net, 0.0).unwrap();
        let r_half = predicted_ratio(&net, 0.5).unwrap();
        assert!((r_half - (r0 + r1) / 2.0).abs() < 1e-12);
    }
}
