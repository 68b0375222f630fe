use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{evaluate, EvalReport, GeneratorEditor, Judge};
use crate::data::Splits;
use crate::error::{Error, Result};
use crate::networks::{Conditioning, SkipMode};
use crate::stu::StuVariant;
use crate::train::{TrainConfig, Trainer};

/// One controlled substitution relative to the standard model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Standard,
    /// Conditioned on target rather than difference attributes.
    Dst,
    Conv,
    ConvRes,
    GruOutput,
    Res,
    SkipNone,
    SkipRaw1,
    SkipRaw2,
    SkipRawAll,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::Standard,
        Variant::Dst,
        Variant::Conv,
        Variant::ConvRes,
        Variant::GruOutput,
        Variant::Res,
        Variant::SkipNone,
        Variant::SkipRaw1,
        Variant::SkipRaw2,
        Variant::SkipRawAll,
    ];

    /// The six transfer-cell and conditioning variants.
    pub const CELL_VARIANTS: [Variant; 6] = [
        Variant::Standard,
        Variant::Dst,
        Variant::Conv,
        Variant::ConvRes,
        Variant::GruOutput,
        Variant::Res,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Standard => "standard",
            Variant::Dst => "dst",
            Variant::Conv => "conv",
            Variant::ConvRes => "conv_res",
            Variant::GruOutput => "gru_output",
            Variant::Res => "res",
            Variant::SkipNone => "none",
            Variant::SkipRaw1 => "raw1",
            Variant::SkipRaw2 => "raw2",
            Variant::SkipRawAll => "raw_all",
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<Variant>> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| p.parse())
            .collect()
    }

    /// `base` with this variant's substitution applied.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        let m = &mut c.model;
        m.skip_mode = SkipMode::Stu;
        m.stu_variant = StuVariant::Standard;
        m.conditioning = Conditioning::Difference;
        match self {
            Variant::Standard => {}
            Variant::Dst => m.conditioning = Conditioning::Target,
            Variant::Conv => m.stu_variant = StuVariant::Conv,
            Variant::ConvRes => m.stu_variant = StuVariant::ConvRes,
            Variant::GruOutput => m.stu_variant = StuVariant::GruOutput,
            Variant::Res => m.stu_variant = StuVariant::Res,
            Variant::SkipNone => m.skip_mode = SkipMode::None,
            Variant::SkipRaw1 => m.skip_mode = SkipMode::Raw1,
            Variant::SkipRaw2 => m.skip_mode = SkipMode::Raw2,
            Variant::SkipRawAll => m.skip_mode = SkipMode::RawAll,
        }
        c
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = if s == "gru" { "gru_output" } else { s };
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation variant {s:?}")))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, v: Variant) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.variant == v).and_then(|r| r.report.as_ref())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<12} {:>9} {:>9} {:>8} {:>8}\n",
            "variant", "mean acc", "psnr dB", "ssim", "seconds"
        );
        for r in &self.rows {
            match &r.report {
                Some(rep) => {
                    s += &format!(
                        "{:<12} {:>8.2}% {:>9.2} {:>8.4} {:>8.1}\n",
                        r.variant.name(),
                        100.0 * rep.accuracy.mean,
                        rep.reconstruction.psnr,
                        rep.reconstruction.ssim,
                        r.seconds
                    );
                }
                None => {
                    s += &format!(
                        "{:<12} failed: {}\n",
                        r.variant.name(),
                        r.error.as_deref().unwrap_or("unknown error")
                    );
                }
            }
        }
        s
    }
}

/// Trains and evaluates one variant; with `out`, the run's artifacts land in
/// `out/<variant>`.
pub fn run_variant(base: &TrainConfig, variant: Variant, splits: &Splits, judge: &Judge, floor: f64, out: Option<&Path>) -> Result<(Trainer, EvalReport)> {
    let config = variant.apply(base);
    let mut trainer = Trainer::new(config)?;
    let dir = out.map(|d| d.join(variant.name()));
    trainer.run(&splits.train, dir.as_deref(), |_| {})?;
    let id = crate::checkpoint::encode_trainer(&trainer)?.1;
    let report = evaluate(variant.name(), &GeneratorEditor(&trainer.gen), judge, &splits.test, floor, Some(id))?;
    Ok((trainer, report))
}

/// Trains every listed variant under the same seed and budget. A failing
/// run is recorded and the remaining runs proceed.
pub fn ablation_run(base: &TrainConfig, variants: &[Variant], splits: &Splits, judge: &Judge, floor: f64, out: Option<&Path>) -> AblationTable {
    let rows = variants
        .iter()
        .map(|&variant| {
            let start = Instant::now();
            let result = run_variant(base, variant, splits, judge, floor, out);
            let seconds = start.elapsed().as_secs_f64();
            match result {
                Ok((_, report)) => AblationRow {
                    variant,
                    report: Some(report),
                    error: None,
                    seconds,
                },
                Err(e) => AblationRow {
                    variant,
                    report: None,
                    error: Some(e.to_string()),
                    seconds,
                },
            }
        })
        .collect();
    AblationTable { rows }
}
