use serde::{Deserialize, Serialize};

use super::PaslConfig;
use crate::tensor::conv2d_output_hw;

/// FLOP convention: a multiply-accumulate is 2 FLOPs, a bias add 1, a
/// LeakyReLU 3 (compare, multiply, select) and a ReLU 1, per output element.
pub const FLOP_CONVENTION: &str =
    "FLOPs = 2*MACs + 1 per bias add + 3 per LeakyReLU output + 1 per ReLU output";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityRow {
    pub submodule: String,
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
    pub trainable: bool,
}

impl ComplexityRow {
    pub fn params_m(&self) -> f64 {
        self.params as f64 / 1e6
    }

    pub fn flops_g(&self) -> f64 {
        self.flops as f64 / 1e9
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub config: PaslConfig,
    pub convention: String,
    pub rows: Vec<ComplexityRow>,
}

pub fn complexity_report(cfg: &PaslConfig) -> ComplexityReport {
    let mut enc = ComplexityRow {
        submodule: "Image Encoder".into(),
        params: 0,
        macs: 0,
        flops: 0,
        trainable: true,
    };
    let (mut cin, mut hw) = (3u64, (cfg.input_size, cfg.input_size));
    for (l, &cout) in cfg.channels.iter().enumerate() {
        let cout = cout as u64;
        hw = conv2d_output_hw(hw.0, hw.1, cfg.strides[l]);
        let outputs = cout * (hw.0 * hw.1) as u64;
        let macs = outputs * 9 * cin;
        enc.params += (9 * cin + 1) * cout;
        enc.macs += macs;
        enc.flops += 2 * macs + outputs + 3 * outputs;
        cin = cout;
    }

    let (d, hdn, c) = (cfg.text_dim as u64, cfg.proj_hidden as u64, cfg.feature_channels() as u64);
    let macs = d * hdn + hdn * c;
    let proj = ComplexityRow {
        submodule: "Multi-Modal Projector".into(),
        params: (d + 1) * hdn + (hdn + 1) * c,
        macs,
        flops: 2 * macs + hdn + c + hdn,
        trainable: true,
    };
    let text = ComplexityRow {
        submodule: "Text Encoder (frozen hash stub)".into(),
        params: 0,
        macs: 0,
        flops: 0,
        trainable: false,
    };
    let total = ComplexityRow {
        submodule: "Encoder + Projector".into(),
        params: enc.params + proj.params,
        macs: enc.macs + proj.macs,
        flops: enc.flops + proj.flops,
        trainable: true,
    };
    ComplexityReport {
        config: cfg.clone(),
        convention: FLOP_CONVENTION.into(),
        rows: vec![enc, text, proj, total],
    }
}

impl ComplexityReport {
    pub fn row(&self, name: &str) -> Option<&ComplexityRow> {
        self.rows.iter().find(|r| r.submodule == name)
    }

    /// Aligned text table.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<32} {:>12} {:>14} {:>10} {:>10}\n",
            "Sub-Module", "Params", "FLOPs", "Params(M)", "FLOPs(G)"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<32} {:>12} {:>14} {:>10.2} {:>10.3}\n",
                r.submodule,
                group(r.params),
                group(r.flops),
                r.params_m(),
                r.flops_g()
            ));
        }
        s.push_str(&format!("convention: {}\n", self.convention));
        s
    }
}

/// `6270592` → `6,270,592`.
pub fn group(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}
