//! Confusion-matrix metrics straight from their textbook definitions.

/// Textbook definitions evaluated cell by cell.
pub fn brute_metrics(c: &[Vec<u64>]) -> (f64, f64, f64, f64, f64, Vec<f64>) {
    let k = c.len();
    let mut n = 0.0;
    for r in c {
        for &v in r {
            n += v as f64;
        }
    }
    let mut agree = 0.0;
    for (i, r) in c.iter().enumerate() {
        agree += r[i] as f64;
    }
    let mut chance = 0.0;
    for i in 0..k {
        let mut truth = 0.0;
        let mut pred = 0.0;
        for j in 0..k {
            truth += c[i][j] as f64;
            pred += c[j][i] as f64;
        }
        chance += (truth / n) * (pred / n);
    }
    let kappa = (agree / n - chance) / (1.0 - chance);
    let mut f1s = Vec::new();
    let (mut sens, mut spec) = (0.0, 0.0);
    for cls in 0..k {
        let (mut tp, mut fp, mut fn_, mut tn) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..k {
            for j in 0..k {
                let v = c[i][j] as f64;
                match (i == cls, j == cls) {
                    (true, true) => tp += v,
                    (false, true) => fp += v,
                    (true, false) => fn_ += v,
                    (false, false) => tn += v,
                }
            }
        }
        let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let rec = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        f1s.push(if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 });
        sens += rec;
        spec += if tn + fp > 0.0 { tn / (tn + fp) } else { 0.0 };
    }
    let macro_f1 = f1s.iter().sum::<f64>() / k as f64;
    (agree / n, kappa, macro_f1, sens / k as f64, spec / k as f64, f1s)
}
