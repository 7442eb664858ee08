use std::fmt::Write as _;

/// Epoch means of each loss term; absent terms are empty in the CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: [f64; 4],
    pub cls: f64,
    pub attr: Option<f64>,
    pub uvos: Option<f64>,
    pub ebm: Option<f64>,
    pub recon: Option<f64>,
    pub kl: Option<f64>,
    pub energy: Option<f64>,
    pub ci: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

pub const LOG_HEADER: &str = "epoch,lr0,lr1,lr2,lr3,cls,attr,uvos,ebm,recon,kl,energy,ci,wall_ms";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.10e}")).unwrap_or_default()
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.lr[0],
                r.lr[1],
                r.lr[2],
                r.lr[3],
                r.cls,
                opt(r.attr),
                opt(r.uvos),
                opt(r.ebm),
                opt(r.recon),
                opt(r.kl),
                opt(r.energy),
                opt(r.ci),
                r.wall_ms
            );
        }
        out
    }
}
