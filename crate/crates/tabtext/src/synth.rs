//! Seeded synthetic emergency-department visit generator.
//!
//! Rows follow a fixed schema (triage vitals, comorbidity flags, prior-visit
//! counts, complaint one-hots, a free-text chief complaint) and three binary
//! labels are drawn from a logistic model over standardized features plus a
//! per-template text offset. The generating coefficients are stored with the
//! dataset, so the achievable (Bayes) AUC of each task is recomputable by
//! Monte Carlo. Signal placement is steerable: per-group weight knobs scale
//! how much outcome signal lives in vitals, comorbidities, visit history,
//! complaint one-hots, and the residual free text.
//!
//! Several numeric columns (glucose, weight, pain score, prior clinic
//! visits, days since last visit) carry no outcome weight, are frequently
//! missing, and vary in digit length. They surround the predictive
//! prior-ED-visit count, so in a headerless rendering with digit-split
//! tokenization its token offset from every word anchor jitters from row to
//! row and neither value nor position identifies it.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{roc_auc, EvalError};
use crate::tabular::{parse_schema, Row, TableSchema};

pub const TASKS: [&str; 3] = ["hospitalization", "critical", "reattendance"];

pub fn task_index(name: &str) -> Option<usize> {
    TASKS.iter().position(|t| *t == name)
}

/// The fixed table layout. The comorbidity group renders as a
/// variable-length list ahead of the numeric block, and the zero-weight
/// columns inside that block are often missing and vary in digit length,
/// so without column headings neither absolute nor relative position
/// identifies a given number.
pub const SCHEMA_TOML: &str = r#"
[[group]]
id = "comorbidity"
label = "Comorbidities"
members = ["cm_htn", "cm_dm", "cm_copd", "cm_chf", "cm_ckd", "cm_ca"]
empty = "none"

[[group]]
id = "complaint"
label = "Presenting complaint"
members = ["cc_chest", "cc_breath", "cc_abdo", "cc_fever", "cc_head", "cc_dizzy", "cc_fall", "cc_weak", "cc_nausea", "cc_back"]
empty = "none"

[[column]]
name = "age"
kind = "numeric"
heading = "Age"

[[column]]
name = "temp"
kind = "numeric"
heading = "Temperature"
unit = "C"

[[column]]
name = "hr"
kind = "numeric"
heading = "Heart rate"
unit = "bpm"

[[column]]
name = "rr"
kind = "numeric"
heading = "Respiratory rate"
unit = "breaths/min"

[[column]]
name = "sbp"
kind = "numeric"
heading = "Systolic blood pressure"
unit = "mmHg"

[[column]]
name = "dbp"
kind = "numeric"
heading = "Diastolic blood pressure"
unit = "mmHg"

[[column]]
name = "spo2"
kind = "numeric"
heading = "Oxygen saturation"
unit = "%"

[[column]]
name = "cm_htn"
kind = "onehot"
group = "comorbidity"
label = "hypertension"

[[column]]
name = "cm_dm"
kind = "onehot"
group = "comorbidity"
label = "diabetes"

[[column]]
name = "cm_copd"
kind = "onehot"
group = "comorbidity"
label = "COPD"

[[column]]
name = "cm_chf"
kind = "onehot"
group = "comorbidity"
label = "heart failure"

[[column]]
name = "cm_ckd"
kind = "onehot"
group = "comorbidity"
label = "chronic kidney disease"

[[column]]
name = "cm_ca"
kind = "onehot"
group = "comorbidity"
label = "cancer"

[[column]]
name = "glucose"
kind = "numeric"
heading = "Blood glucose"
unit = "mg/dL"

[[column]]
name = "weight"
kind = "numeric"
heading = "Weight"
unit = "kg"

[[column]]
name = "pain"
kind = "numeric"
heading = "Pain score"

[[column]]
name = "n_ed"
kind = "numeric"
heading = "Prior ED visits"

[[column]]
name = "n_clinic"
kind = "numeric"
heading = "Prior clinic visits"

[[column]]
name = "d_last"
kind = "numeric"
heading = "Days since last visit"

[[column]]
name = "n_hosp"
kind = "numeric"
heading = "Prior hospital admissions"

[[column]]
name = "n_icu"
kind = "numeric"
heading = "Prior ICU stays"

[[column]]
name = "cc_chest"
kind = "onehot"
group = "complaint"
label = "chest pain"

[[column]]
name = "cc_breath"
kind = "onehot"
group = "complaint"
label = "shortness of breath"

[[column]]
name = "cc_abdo"
kind = "onehot"
group = "complaint"
label = "abdominal pain"

[[column]]
name = "cc_fever"
kind = "onehot"
group = "complaint"
label = "fever"

[[column]]
name = "cc_head"
kind = "onehot"
group = "complaint"
label = "headache"

[[column]]
name = "cc_dizzy"
kind = "onehot"
group = "complaint"
label = "dizziness"

[[column]]
name = "cc_fall"
kind = "onehot"
group = "complaint"
label = "fall"

[[column]]
name = "cc_weak"
kind = "onehot"
group = "complaint"
label = "weakness"

[[column]]
name = "cc_nausea"
kind = "onehot"
group = "complaint"
label = "nausea and vomiting"

[[column]]
name = "cc_back"
kind = "onehot"
group = "complaint"
label = "back pain"

[[column]]
name = "arrival"
kind = "categorical"
heading = "Arrival mode"
values = { amb = "ambulance", walk = "walk-in", transfer = "inter-hospital transfer" }

[[column]]
name = "complaint_text"
kind = "free_text"
heading = "Chief complaint"
"#;

pub fn schema() -> TableSchema {
    parse_schema(SCHEMA_TOML).expect("built-in schema parses")
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("synth config: {0}")]
    BadConfig(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("oracle: {0}")]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Scale of the unobserved logit noise added before label draws.
    pub noise: f64,
    pub vitals_weight: f64,
    pub comorbidity_weight: f64,
    pub history_weight: f64,
    pub complaint_weight: f64,
    pub text_weight: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 20_000,
            n_test: 5_000,
            seed: 0,
            noise: 0.6,
            vitals_weight: 1.0,
            comorbidity_weight: 1.0,
            history_weight: 1.0,
            complaint_weight: 1.0,
            text_weight: 1.0,
        }
    }
}

const MAX_ROWS: usize = 10_000_000;

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::BadConfig(m));
        if self.n_train == 0 || self.n_test == 0 {
            return bad("n_train and n_test must be at least 1".into());
        }
        if self.n_train + self.n_test > MAX_ROWS {
            return bad(format!("more than {MAX_ROWS} total rows requested"));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return bad(format!("noise {} must be finite and nonnegative", self.noise));
        }
        for (name, w) in [
            ("vitals_weight", self.vitals_weight),
            ("comorbidity_weight", self.comorbidity_weight),
            ("history_weight", self.history_weight),
            ("complaint_weight", self.complaint_weight),
            ("text_weight", self.text_weight),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return bad(format!("{name} {w} must be finite and nonnegative"));
            }
        }
        Ok(())
    }
}

pub const NUM_COMPLAINTS: usize = 10;
/// Complaint index meaning "none of the ten one-hot complaints".
pub const OTHER_COMPLAINT: usize = NUM_COMPLAINTS;

struct TemplateDef {
    complaint: usize,
    text: &'static str,
    /// Residual per-task logit offsets carried only by the free text.
    offsets: [f64; 3],
}

const TEMPLATES: &[TemplateDef] = &[
    TemplateDef { complaint: 0, text: "crushing chest pain radiating to the left arm with sweating", offsets: [1.2, 1.6, 0.3] },
    TemplateDef { complaint: 0, text: "sharp chest pain that is worse on deep breathing", offsets: [-0.6, -0.8, -0.1] },
    TemplateDef { complaint: 0, text: "chest tightness with palpitations since this morning", offsets: [0.3, 0.2, 0.1] },
    TemplateDef { complaint: 1, text: "severe difficulty breathing at rest with blue lips", offsets: [1.4, 1.8, 0.2] },
    TemplateDef { complaint: 1, text: "gradually worsening shortness of breath on exertion", offsets: [0.4, 0.2, 0.3] },
    TemplateDef { complaint: 1, text: "mild wheeze after walking up the stairs", offsets: [-0.8, -1.0, -0.2] },
    TemplateDef { complaint: 2, text: "sudden severe abdominal pain with a rigid abdomen", offsets: [1.0, 1.2, 0.0] },
    TemplateDef { complaint: 2, text: "crampy abdominal pain after eating fatty food", offsets: [-0.5, -0.6, 0.0] },
    TemplateDef { complaint: 2, text: "dull abdominal ache for several weeks", offsets: [-0.3, -0.4, 0.2] },
    TemplateDef { complaint: 3, text: "high fever with shaking chills and confusion", offsets: [1.1, 1.3, 0.1] },
    TemplateDef { complaint: 3, text: "fever and sore throat for two days", offsets: [-0.7, -0.8, -0.1] },
    TemplateDef { complaint: 3, text: "low grade fever after recent travel", offsets: [-0.2, -0.3, 0.1] },
    TemplateDef { complaint: 4, text: "sudden worst headache of my life", offsets: [1.0, 1.4, 0.0] },
    TemplateDef { complaint: 4, text: "throbbing headache with light sensitivity", offsets: [-0.4, -0.5, 0.0] },
    TemplateDef { complaint: 4, text: "tension headache after a stressful week", offsets: [-0.8, -0.9, -0.1] },
    TemplateDef { complaint: 5, text: "room spinning with vomiting and unable to stand", offsets: [0.7, 0.8, 0.2] },
    TemplateDef { complaint: 5, text: "lightheaded when standing up quickly", offsets: [-0.5, -0.5, 0.0] },
    TemplateDef { complaint: 5, text: "intermittent dizziness on and off for a month", offsets: [-0.2, -0.3, 0.2] },
    TemplateDef { complaint: 6, text: "fall from a ladder with loss of consciousness", offsets: [1.2, 1.4, 0.0] },
    TemplateDef { complaint: 6, text: "tripped on the stairs and hurt the wrist", offsets: [-0.7, -0.9, -0.1] },
    TemplateDef { complaint: 6, text: "found on the floor unable to get up", offsets: [0.8, 0.6, 0.4] },
    TemplateDef { complaint: 7, text: "sudden weakness of the right arm and slurred speech", offsets: [1.3, 1.5, 0.1] },
    TemplateDef { complaint: 7, text: "feeling weak and tired for a week", offsets: [-0.3, -0.4, 0.3] },
    TemplateDef { complaint: 7, text: "legs giving way when walking", offsets: [0.3, 0.2, 0.3] },
    TemplateDef { complaint: 8, text: "persistent vomiting and unable to keep fluids down", offsets: [0.8, 0.6, 0.2] },
    TemplateDef { complaint: 8, text: "nausea after starting a new medication", offsets: [-0.6, -0.7, 0.0] },
    TemplateDef { complaint: 8, text: "queasy stomach since breakfast", offsets: [-0.8, -0.8, -0.2] },
    TemplateDef { complaint: 9, text: "severe back pain with numb legs and trouble passing urine", offsets: [1.1, 1.2, 0.0] },
    TemplateDef { complaint: 9, text: "flare up of long standing lower back pain", offsets: [-0.5, -0.7, 0.4] },
    TemplateDef { complaint: 9, text: "pulled a muscle in the back lifting boxes", offsets: [-0.9, -1.0, -0.3] },
    TemplateDef { complaint: 10, text: "feeling generally unwell for two days", offsets: [0.1, 0.0, 0.2] },
    TemplateDef { complaint: 10, text: "ran out of regular medication and needs a refill", offsets: [-1.2, -1.3, -0.2] },
    TemplateDef { complaint: 10, text: "twisted an ankle playing football", offsets: [-0.8, -1.0, -0.3] },
];

pub fn template_text(index: usize) -> &'static str {
    TEMPLATES[index].text
}

pub fn num_templates() -> usize {
    TEMPLATES.len()
}

// Population moments used both to draw features and to standardize them in
// the outcome model. The small counts (pain, n_ed, n_hosp, n_icu) share one
// distribution on purpose: without headings their values alone do not
// reveal which is which. Glucose, weight, n_clinic, and d_last span wider
// ranges, so their digit length varies from row to row.
const CM_PREVALENCE: [f64; 6] = [0.35, 0.25, 0.15, 0.12, 0.10, 0.08];
const CC_PREVALENCE: [f64; 11] = [
    0.14, 0.12, 0.13, 0.09, 0.07, 0.06, 0.08, 0.07, 0.06, 0.08, 0.10,
];
const ARRIVAL_PREVALENCE: [f64; 3] = [0.30, 0.60, 0.10];
const COUNT_RATE: f64 = 1.2;
const CLINIC_RATE: f64 = 8.0;
// Missingness of the zero-weight numeric columns.
const GLUCOSE_MISSING: f64 = 0.3;
const WEIGHT_MISSING: f64 = 0.2;
const PAIN_MISSING: f64 = 0.4;
const CLINIC_MISSING: f64 = 0.4;
const DLAST_MISSING: f64 = 0.3;

pub const NUM_FEATURES: usize = 31;

const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "age", "temp", "hr", "rr", "sbp", "dbp", "spo2", "cm_htn", "cm_dm", "cm_copd", "cm_chf",
    "cm_ckd", "cm_ca", "glucose", "weight", "pain", "n_ed", "n_clinic", "d_last", "n_hosp",
    "n_icu", "cc_chest", "cc_breath", "cc_abdo", "cc_fever", "cc_head", "cc_dizzy", "cc_fall",
    "cc_weak", "cc_nausea", "cc_back",
];

// Unscaled per-task coefficients on standardized features. Hospitalization
// spreads signal across every block; critical illness leans on vitals;
// reattendance is dominated by n_ed, whose identity inside the numeric
// block is only recoverable from the column headings. Glucose, weight,
// pain, n_clinic, and d_last are zero in every task by construction.
const BASE_BETAS: [[f64; NUM_FEATURES]; 3] = [
    [
        0.25, 0.45, 0.50, 0.55, -0.45, -0.25, -0.70, 0.35, 0.30, 0.40, 0.45, 0.35, 0.30, 0.00,
        0.00, 0.00, 0.30, 0.00, 0.00, 0.55, 0.40, 0.50, 0.60, 0.25, 0.30, -0.20, 0.15, 0.35,
        0.45, 0.10, -0.30,
    ],
    [
        0.30, 0.30, 0.60, 0.80, -0.70, -0.30, -1.00, 0.20, 0.15, 0.30, 0.35, 0.20, 0.10, 0.00,
        0.00, 0.00, 0.10, 0.00, 0.00, 0.20, 0.35, 0.70, 0.90, 0.20, 0.25, 0.10, 0.20, 0.10,
        0.30, 0.05, -0.20,
    ],
    [
        0.10, 0.05, 0.10, 0.08, -0.05, -0.03, -0.10, 0.15, 0.12, 0.20, 0.15, 0.10, 0.08, 0.00,
        0.00, 0.00, 1.80, 0.00, 0.00, 0.25, 0.05, 0.10, 0.08, 0.12, -0.05, 0.05, 0.10, 0.15,
        0.20, 0.05, 0.25,
    ],
];

// Global per-task signal scale and intercept, calibrated once by Monte
// Carlo so the default hospitalization task lands at Bayes AUC 0.95.
const TASK_SCALE: [f64; 3] = [1.95, 1.3, 1.0];
const INTERCEPTS: [f64; 3] = [-2.6, -3.4, -1.6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub age: u32,
    pub temp: f64,
    pub hr: u32,
    pub rr: u32,
    pub sbp: u32,
    pub dbp: u32,
    pub spo2: u32,
    pub comorbidities: [bool; 6],
    // The five optional columns carry no outcome weight; `None` renders as
    // an empty cell.
    pub glucose: Option<u32>,
    pub weight: Option<u32>,
    pub pain: Option<u32>,
    pub n_ed: u32,
    pub n_clinic: Option<u32>,
    pub d_last: Option<u32>,
    pub n_hosp: u32,
    pub n_icu: u32,
    /// 0..=9 are the one-hot complaints; `OTHER_COMPLAINT` means none.
    pub complaint: usize,
    /// Index into the global template pool; always consistent with `complaint`.
    pub template: usize,
    pub arrival: usize,
}

impl Visit {
    pub fn features(&self) -> [f64; NUM_FEATURES] {
        let mut x = [0.0; NUM_FEATURES];
        x[0] = self.age as f64;
        x[1] = self.temp;
        x[2] = self.hr as f64;
        x[3] = self.rr as f64;
        x[4] = self.sbp as f64;
        x[5] = self.dbp as f64;
        x[6] = self.spo2 as f64;
        for (k, &flag) in self.comorbidities.iter().enumerate() {
            x[7 + k] = flag as u8 as f64;
        }
        // The optional columns have zero coefficients in every task, so a
        // missing value can enter the outcome model as anything; use 0.
        x[13] = self.glucose.unwrap_or(0) as f64;
        x[14] = self.weight.unwrap_or(0) as f64;
        x[15] = self.pain.unwrap_or(0) as f64;
        x[16] = self.n_ed as f64;
        x[17] = self.n_clinic.unwrap_or(0) as f64;
        x[18] = self.d_last.unwrap_or(0) as f64;
        x[19] = self.n_hosp as f64;
        x[20] = self.n_icu as f64;
        for k in 0..NUM_COMPLAINTS {
            x[21 + k] = (self.complaint == k) as u8 as f64;
        }
        x
    }

    /// Raw cell values keyed by source column name, ready for serialization.
    pub fn row(&self) -> Row {
        let mut row = Row::new();
        let mut put = |k: &str, v: String| {
            row.insert(k.to_string(), v);
        };
        put("age", self.age.to_string());
        put("temp", format!("{:.1}", self.temp));
        put("hr", self.hr.to_string());
        put("rr", self.rr.to_string());
        put("sbp", self.sbp.to_string());
        put("dbp", self.dbp.to_string());
        put("spo2", self.spo2.to_string());
        for (k, name) in ["cm_htn", "cm_dm", "cm_copd", "cm_chf", "cm_ckd", "cm_ca"]
            .iter()
            .enumerate()
        {
            put(name, (self.comorbidities[k] as u8).to_string());
        }
        let opt_cell = |v: Option<u32>| v.map(|c| c.to_string()).unwrap_or_default();
        put("glucose", opt_cell(self.glucose));
        put("weight", opt_cell(self.weight));
        put("pain", opt_cell(self.pain));
        put("n_ed", self.n_ed.to_string());
        put("n_clinic", opt_cell(self.n_clinic));
        put("d_last", opt_cell(self.d_last));
        put("n_hosp", self.n_hosp.to_string());
        put("n_icu", self.n_icu.to_string());
        for (k, name) in [
            "cc_chest", "cc_breath", "cc_abdo", "cc_fever", "cc_head", "cc_dizzy", "cc_fall",
            "cc_weak", "cc_nausea", "cc_back",
        ]
        .iter()
        .enumerate()
        {
            put(name, ((self.complaint == k) as u8).to_string());
        }
        put("arrival", ["amb", "walk", "transfer"][self.arrival].to_string());
        put("complaint_text", TEMPLATES[self.template].text.to_string());
        row
    }
}

/// The generating model, with group weights and scales already applied, so
/// scores and the Bayes AUC are recomputable from this struct alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub feature_names: Vec<String>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// betas[task][feature]
    pub betas: Vec<Vec<f64>>,
    /// template_offsets[task][template]
    pub template_offsets: Vec<Vec<f64>>,
    pub intercepts: Vec<f64>,
    pub noise: f64,
}

impl Coefficients {
    pub fn from_config(cfg: &SynthConfig) -> Self {
        let mut means = vec![0.0; NUM_FEATURES];
        let mut stds = vec![0.0; NUM_FEATURES];
        let moments = [
            (58.0, 18.0),
            (37.0, 0.7),
            (84.0, 16.0),
            (18.0, 4.0),
            (132.0, 20.0),
            (78.0, 12.0),
            (97.0, 2.5),
        ];
        for (j, (m, s)) in moments.iter().enumerate() {
            means[j] = *m;
            stds[j] = *s;
        }
        for (k, &p) in CM_PREVALENCE.iter().enumerate() {
            means[7 + k] = p;
            stds[7 + k] = (p * (1.0 - p)).sqrt();
        }
        means[13] = 118.0;
        stds[13] = 50.0;
        means[14] = 82.0;
        stds[14] = 19.0;
        for j in [15, 16, 19, 20] {
            means[j] = COUNT_RATE;
            stds[j] = COUNT_RATE.sqrt();
        }
        means[17] = CLINIC_RATE;
        stds[17] = CLINIC_RATE.sqrt();
        means[18] = 120.0;
        stds[18] = 110.0;
        for (k, &p) in CC_PREVALENCE[..NUM_COMPLAINTS].iter().enumerate() {
            means[21 + k] = p;
            stds[21 + k] = (p * (1.0 - p)).sqrt();
        }
        // The zero-beta columns (13..=15, 17, 18) keep weight 1.0: no knob
        // can put signal into them.
        let group_weight = |j: usize| match j {
            0 | 13..=15 | 17 | 18 => 1.0,
            1..=6 => cfg.vitals_weight,
            7..=12 => cfg.comorbidity_weight,
            16 | 19 | 20 => cfg.history_weight,
            _ => cfg.complaint_weight,
        };
        let betas: Vec<Vec<f64>> = (0..3)
            .map(|t| {
                (0..NUM_FEATURES)
                    .map(|j| TASK_SCALE[t] * group_weight(j) * BASE_BETAS[t][j])
                    .collect()
            })
            .collect();
        let template_offsets: Vec<Vec<f64>> = (0..3)
            .map(|t| {
                TEMPLATES
                    .iter()
                    .map(|tpl| TASK_SCALE[t] * cfg.text_weight * tpl.offsets[t])
                    .collect()
            })
            .collect();
        Self {
            feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            means,
            stds,
            betas,
            template_offsets,
            intercepts: INTERCEPTS.to_vec(),
            noise: cfg.noise,
        }
    }

    /// Deterministic part of the logit; this is also the Bayes-optimal
    /// score, since the remaining noise is independent of the features.
    pub fn score(&self, features: &[f64; NUM_FEATURES], template: usize, task: usize) -> f64 {
        let mut s = self.intercepts[task];
        for j in 0..NUM_FEATURES {
            s += self.betas[task][j] * (features[j] - self.means[j]) / self.stds[j];
        }
        s + self.template_offsets[task][template]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<u32>,
    pub test: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub visits: Vec<Visit>,
    /// labels[row] = one 0/1 outcome per task.
    pub labels: Vec<[u8; 3]>,
    pub split: SplitManifest,
    pub coefficients: Coefficients,
    pub bayes_auc: [f64; 3],
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn weighted_choice<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

fn draw_normal<R: Rng>(rng: &mut R, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    let dist = Normal::new(mean, sd).expect("finite moments");
    rng.sample::<f64, _>(dist).clamp(lo, hi)
}

fn draw_count<R: Rng>(rng: &mut R) -> u32 {
    let dist = Poisson::new(COUNT_RATE).expect("positive rate");
    (rng.sample::<f64, _>(dist) as u32).min(9)
}

/// A value that is absent in `missing` of rows. The value is drawn
/// unconditionally so the generator consumes a fixed number of random
/// draws per row either way.
fn draw_optional<R: Rng>(
    rng: &mut R,
    missing: f64,
    draw: impl FnOnce(&mut R) -> u32,
) -> Option<u32> {
    let value = draw(rng);
    (rng.random::<f64>() >= missing).then_some(value)
}

fn draw_visit<R: Rng>(rng: &mut R) -> Visit {
    let age = draw_normal(rng, 58.0, 18.0, 18.0, 100.0).round() as u32;
    let temp = (draw_normal(rng, 37.0, 0.7, 34.0, 41.5) * 10.0).round() / 10.0;
    let hr = draw_normal(rng, 84.0, 16.0, 40.0, 180.0).round() as u32;
    let rr = draw_normal(rng, 18.0, 4.0, 8.0, 40.0).round() as u32;
    let sbp = draw_normal(rng, 132.0, 20.0, 70.0, 230.0).round() as u32;
    let dbp = draw_normal(rng, 78.0, 12.0, 35.0, 140.0).round() as u32;
    let spo2 = draw_normal(rng, 97.0, 2.5, 70.0, 100.0).round() as u32;
    let mut comorbidities = [false; 6];
    for (k, flag) in comorbidities.iter_mut().enumerate() {
        *flag = rng.random::<f64>() < CM_PREVALENCE[k];
    }
    let glucose = draw_optional(rng, GLUCOSE_MISSING, |r| {
        draw_normal(r, 118.0, 50.0, 60.0, 400.0).round() as u32
    });
    let weight = draw_optional(rng, WEIGHT_MISSING, |r| {
        draw_normal(r, 82.0, 19.0, 40.0, 180.0).round() as u32
    });
    let pain = draw_optional(rng, PAIN_MISSING, draw_count);
    let n_ed = draw_count(rng);
    let n_clinic = draw_optional(rng, CLINIC_MISSING, |r| {
        let dist = Poisson::new(CLINIC_RATE).expect("positive rate");
        (r.sample::<f64, _>(dist) as u32).min(30)
    });
    let d_last = draw_optional(rng, DLAST_MISSING, |r| {
        draw_normal(r, 120.0, 110.0, 0.0, 900.0).round() as u32
    });
    let n_hosp = draw_count(rng);
    let n_icu = draw_count(rng);
    let complaint = weighted_choice(rng, &CC_PREVALENCE);
    let pool: Vec<usize> = (0..TEMPLATES.len())
        .filter(|&i| TEMPLATES[i].complaint == complaint)
        .collect();
    let template = pool[rng.random_range(0..pool.len())];
    let arrival = weighted_choice(rng, &ARRIVAL_PREVALENCE);
    Visit {
        age,
        temp,
        hr,
        rr,
        sbp,
        dbp,
        spo2,
        comorbidities,
        glucose,
        weight,
        pain,
        n_ed,
        n_clinic,
        d_last,
        n_hosp,
        n_icu,
        complaint,
        template,
        arrival,
    }
}

fn draw_labels<R: Rng>(rng: &mut R, coeffs: &Coefficients, visit: &Visit) -> [u8; 3] {
    let features = visit.features();
    let mut labels = [0u8; 3];
    for (t, label) in labels.iter_mut().enumerate() {
        let eps: f64 = rng.sample(StandardNormal);
        let p = sigmoid(coeffs.score(&features, visit.template, t) + coeffs.noise * eps);
        *label = (rng.random::<f64>() < p) as u8;
    }
    labels
}

const MC_STREAM: u64 = 1;
pub const BAYES_DRAWS: usize = 100_000;

/// Monte Carlo estimate of each task's achievable AUC: fresh rows are drawn
/// from the population, scored with the noise-free logit (the Bayes-optimal
/// score), and labels drawn from the full noisy model.
pub fn monte_carlo_bayes_auc(
    coeffs: &Coefficients,
    seed: u64,
    stream: u64,
    draws: usize,
) -> Result<[f64; 3], SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut scores = vec![[0.0; 3]; draws];
    let mut labels = vec![[0u8; 3]; draws];
    for i in 0..draws {
        let visit = draw_visit(&mut rng);
        let features = visit.features();
        for t in 0..3 {
            scores[i][t] = coeffs.score(&features, visit.template, t);
        }
        labels[i] = draw_labels(&mut rng, coeffs, &visit);
    }
    let mut out = [0.0; 3];
    for t in 0..3 {
        let s: Vec<f64> = scores.iter().map(|r| r[t]).collect();
        let l: Vec<u8> = labels.iter().map(|r| r[t]).collect();
        out[t] = roc_auc(&s, &l)?;
    }
    Ok(out)
}

/// Generate the dataset: `n_train + n_test` rows with three labels each, a
/// contiguous train/test split (rows are exchangeable), the generating
/// coefficients, and the Monte Carlo Bayes AUC per task.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset, SynthError> {
    cfg.validate()?;
    let coeffs = Coefficients::from_config(cfg);
    let n = cfg.n_train + cfg.n_test;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut visits = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let visit = draw_visit(&mut rng);
        labels.push(draw_labels(&mut rng, &coeffs, &visit));
        visits.push(visit);
    }
    let split = SplitManifest {
        train: (0..cfg.n_train as u32).collect(),
        test: (cfg.n_train as u32..n as u32).collect(),
    };
    let bayes_auc = monte_carlo_bayes_auc(&coeffs, cfg.seed, MC_STREAM, BAYES_DRAWS)?;
    Ok(SynthDataset {
        config: cfg.clone(),
        visits,
        labels,
        split,
        coefficients: coeffs,
        bayes_auc,
    })
}

impl SynthDataset {
    pub fn labels_for(&self, task: usize) -> Vec<u8> {
        self.labels.iter().map(|l| l[task]).collect()
    }

    /// CSV with one column per schema column plus the three label columns.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), SynthError> {
        let schema = schema();
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = schema
            .columns
            .iter()
            .map(|c| c.source_name.clone())
            .collect();
        header.extend(TASKS.iter().map(|t| t.to_string()));
        wtr.write_record(&header)?;
        for (visit, labels) in self.visits.iter().zip(&self.labels) {
            let row = visit.row();
            let mut record: Vec<String> = schema
                .columns
                .iter()
                .map(|c| row[&c.source_name].clone())
                .collect();
            record.extend(labels.iter().map(|l| l.to_string()));
            wtr.write_record(&record)?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Numeric features for the tree baseline: the 31 model features plus a
    /// one-hot encoding of the arrival mode (which carries no signal).
    /// Missing optional values come through as NaN and rely on the
    /// learner's missing-value routing.
    pub fn feature_matrix(&self) -> (Vec<String>, Vec<Vec<f64>>) {
        let mut names: Vec<String> = FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
        names.extend(
            ["arrival_amb", "arrival_walk", "arrival_transfer"]
                .iter()
                .map(|s| s.to_string()),
        );
        let nan_if_missing = |x: &mut Vec<f64>, j: usize, v: Option<u32>| {
            if v.is_none() {
                x[j] = f64::NAN;
            }
        };
        let rows = self
            .visits
            .iter()
            .map(|v| {
                let mut x = v.features().to_vec();
                nan_if_missing(&mut x, 13, v.glucose);
                nan_if_missing(&mut x, 14, v.weight);
                nan_if_missing(&mut x, 15, v.pain);
                nan_if_missing(&mut x, 17, v.n_clinic);
                nan_if_missing(&mut x, 18, v.d_last);
                for k in 0..3 {
                    x.push((v.arrival == k) as u8 as f64);
                }
                x
            })
            .collect();
        (names, rows)
    }
}
