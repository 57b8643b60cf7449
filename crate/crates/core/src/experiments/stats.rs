//! Balanced two-way between-subjects ANOVA and Student's two-sample t-test.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::dist::{f_sf, t_two_sided};

/// A test statistic with its p-value and effect size.
///
/// For F tests `dof` is `[effect, error]` and the effect size is partial η²;
/// for t tests `dof` is `[ν]` and the effect size is Cohen's d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatResult {
    pub statistic: f64,
    pub p_value: f64,
    pub effect_size: f64,
    pub dof: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SumsOfSquares {
    pub a: f64,
    pub b: f64,
    pub interaction: f64,
    pub error: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anova2x2 {
    pub factor_a: StatResult,
    pub factor_b: StatResult,
    pub interaction: StatResult,
    pub ss: SumsOfSquares,
    pub ms_error: f64,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Two-way ANOVA on four equal-size cells, indexed `cells[a][b]` with
/// `a, b ∈ {0, 1}`.
pub fn anova_2x2(cells: [[&[f64]; 2]; 2]) -> Result<Anova2x2> {
    let n = cells[0][0].len();
    if cells.iter().flatten().any(|c| c.len() != n) {
        let sizes: Vec<usize> = cells.iter().flatten().map(|c| c.len()).collect();
        return Err(Error::invalid(format!(
            "anova_2x2 needs equal cell sizes, got {sizes:?}"
        )));
    }
    if n < 2 {
        return Err(Error::invalid(format!(
            "anova_2x2 needs at least 2 observations per cell, got {n}"
        )));
    }
    let nf = n as f64;
    let cell_mean = cells.map(|row| row.map(mean));
    let grand = cell_mean.iter().flatten().sum::<f64>() / 4.0;
    let a_mean = [0, 1].map(|a| (cell_mean[a][0] + cell_mean[a][1]) / 2.0);
    let b_mean = [0, 1].map(|b| (cell_mean[0][b] + cell_mean[1][b]) / 2.0);

    let ss_a = 2.0 * nf * a_mean.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_b = 2.0 * nf * b_mean.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let mut ss_ab = 0.0;
    let mut ss_err = 0.0;
    let mut ss_total = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            let inter = cell_mean[a][b] - a_mean[a] - b_mean[b] + grand;
            ss_ab += nf * inter * inter;
            for &x in cells[a][b] {
                ss_err += (x - cell_mean[a][b]).powi(2);
                ss_total += (x - grand).powi(2);
            }
        }
    }
    let df_err = 4.0 * (nf - 1.0);
    let ms_err = ss_err / df_err;
    if !(ms_err > 0.0) {
        return Err(Error::DegenerateVariance(
            "anova_2x2: within-cell variance is zero",
        ));
    }
    let effect = |ss: f64| -> Result<StatResult> {
        let f = ss / ms_err;
        Ok(StatResult {
            statistic: f,
            p_value: f_sf(f, 1.0, df_err)?,
            effect_size: ss / (ss + ss_err),
            dof: vec![1.0, df_err],
        })
    };
    Ok(Anova2x2 {
        factor_a: effect(ss_a)?,
        factor_b: effect(ss_b)?,
        interaction: effect(ss_ab)?,
        ss: SumsOfSquares {
            a: ss_a,
            b: ss_b,
            interaction: ss_ab,
            error: ss_err,
            total: ss_total,
        },
        ms_error: ms_err,
    })
}

/// Pooled-variance two-sample t-test (two-sided) with Cohen's d.
///
/// Zero pooled variance is accepted only when the means are equal, giving
/// `t = 0, p = 1, d = 0`.
pub fn t_test(a: &[f64], b: &[f64]) -> Result<StatResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid(format!(
            "t_test needs at least 2 observations per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    let ssa: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let ssb: f64 = b.iter().map(|x| (x - mb).powi(2)).sum();
    let nu = na + nb - 2.0;
    let pooled_var = (ssa + ssb) / nu;
    let diff = ma - mb;
    if !(pooled_var > 0.0) {
        if diff == 0.0 {
            return Ok(StatResult {
                statistic: 0.0,
                p_value: 1.0,
                effect_size: 0.0,
                dof: vec![nu],
            });
        }
        return Err(Error::DegenerateVariance(
            "t_test: zero variance with unequal means",
        ));
    }
    let t = diff / (pooled_var * (1.0 / na + 1.0 / nb)).sqrt();
    Ok(StatResult {
        statistic: t,
        p_value: t_two_sided(t, nu)?,
        effect_size: diff / pooled_var.sqrt(),
        dof: vec![nu],
    })
}

/// Mean and standard error of the mean (sample SD / √n).
pub fn mean_sem(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = mean(x);
    if x.len() < 2 {
        return (m, 0.0);
    }
    let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0);
    (m, (var / x.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anova_small_example() {
        // Cells {1,2},{3,4},{5,6},{7,8}: grand 4.5, SS_A 32, SS_B 8, SS_AB 0, SS_err 2.
        let r = anova_2x2([[&[1.0, 2.0], &[3.0, 4.0]], [&[5.0, 6.0], &[7.0, 8.0]]]).unwrap();
        assert!((r.ss.a - 32.0).abs() < 1e-12);
        assert!((r.ss.b - 8.0).abs() < 1e-12);
        assert!(r.ss.interaction.abs() < 1e-12);
        assert!((r.ss.error - 2.0).abs() < 1e-12);
        assert!((r.factor_a.statistic - 64.0).abs() < 1e-12);
        assert_eq!(r.factor_a.dof, vec![1.0, 4.0]);
        assert!((r.factor_a.effect_size - 32.0 / 34.0).abs() < 1e-12);
    }

    #[test]
    fn anova_errors() {
        let c = [1.0, 1.0];
        assert!(matches!(
            anova_2x2([[&c, &c], [&c, &c]]),
            Err(Error::DegenerateVariance(_))
        ));
        assert!(anova_2x2([[&[1.0, 2.0], &[1.0]], [&[1.0, 2.0], &[1.0, 2.0]]]).is_err());
        assert!(anova_2x2([[&[1.0], &[1.0]], [&[2.0], &[3.0]]]).is_err());
    }

    #[test]
    fn t_test_special_cases() {
        let a = [1.0, 2.0, 3.0];
        let r = t_test(&a, &a).unwrap();
        assert_eq!((r.statistic, r.p_value, r.effect_size), (0.0, 1.0, 0.0));
        let r = t_test(&a, &[4.0, 5.0, 6.0]).unwrap();
        // pooled SD 1, t = −3 / √(2/3)
        assert!((r.statistic + 3.0 / (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((r.effect_size + 3.0).abs() < 1e-12);
        let s = t_test(&[4.0, 5.0, 6.0], &a).unwrap();
        assert_eq!(s.statistic, -r.statistic);
        assert_eq!(s.p_value, r.p_value);
        assert!(t_test(&[1.0, 1.0], &[2.0, 2.0]).is_err());
        assert_eq!(t_test(&[1.0, 1.0], &[1.0, 1.0]).unwrap().p_value, 1.0);
        assert!(t_test(&[1.0], &a).is_err());
    }

    #[test]
    fn sem_of_five_values() {
        let (m, s) = mean_sem(&[2.0, 4.0, 4.0, 4.0, 6.0]);
        assert_eq!(m, 4.0);
        assert!((s - (2.0f64 / 5.0).sqrt()).abs() < 1e-12);
    }
}
