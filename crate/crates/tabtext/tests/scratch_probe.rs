use tabtext::eval::roc_auc;
use tabtext::synth::{generate, SynthConfig};

#[test]
fn probe_ceilings() {
    let data = generate(&SynthConfig {
        n_train: 20_000,
        n_test: 1,
        seed: 42,
        ..SynthConfig::default()
    })
    .unwrap();
    let task = 2;
    let labels: Vec<u8> = data.labels.iter().map(|l| l[task]).collect();
    let c = &data.coefficients;

    let score_with = |skip_ned: bool| -> Vec<f64> {
        data.visits
            .iter()
            .map(|v| {
                let f = v.features();
                let mut s = 0.0;
                for j in 0..f.len() {
                    if skip_ned && c.feature_names[j] == "n_ed" {
                        continue;
                    }
                    s += c.betas[task][j] * (f[j] - c.means[j]) / c.stds[j];
                }
                s + c.template_offsets[task][v.template]
            })
            .collect()
    };
    let full = roc_auc(&score_with(false), &labels).unwrap();
    let no_ned = roc_auc(&score_with(true), &labels).unwrap();

    // pooling strategy: mean of the five small counts (missing -> skip)
    let pooled: Vec<f64> = data
        .visits
        .iter()
        .map(|v| {
            let vals = [
                v.pain.map(|x| x as f64),
                Some(v.n_ed as f64),
                v.n_clinic.map(|x| x as f64),
                Some(v.n_hosp as f64),
                Some(v.n_icu as f64),
            ];
            let xs: Vec<f64> = vals.into_iter().flatten().collect();
            xs.iter().sum::<f64>() / xs.len() as f64
        })
        .collect();
    let pool_auc = roc_auc(&pooled, &labels).unwrap();

    let ned: Vec<f64> = data.visits.iter().map(|v| v.n_ed as f64).collect();
    let ned_auc = roc_auc(&ned, &labels).unwrap();

    // no-n_ed score plus pooled counts (best "identifiable + soup" combo,
    // weight roughly matched to the n_ed beta)
    let combo: Vec<f64> = score_with(true)
        .iter()
        .zip(&pooled)
        .map(|(s, p)| s + c.betas[task][16] * (p - 1.2) / 1.2f64.sqrt() * 0.5)
        .collect();
    let combo_auc = roc_auc(&combo, &labels).unwrap();

    println!("full Bayes:        {full:.4}");
    println!("without n_ed:      {no_ned:.4}");
    println!("n_ed alone:        {ned_auc:.4}");
    println!("pooled counts:     {pool_auc:.4}");
    println!("no-n_ed + pooled:  {combo_auc:.4}");
}
