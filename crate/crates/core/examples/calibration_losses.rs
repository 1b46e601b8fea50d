//! The four calibration terms on hand-made attention maps, and how they compose with the diffusion loss.

use ctcal::loss::{compose_objective, ctcal_terms, AeBinding, AttnAutoencoder, AutoencoderConfig, CtcalWeights, TermSet};
use ctcal_autodiff::{Graph, Tensor};

/// A `[16, 16, 2]` map with one Gaussian blob per token.
fn blobs(centers: [(f64, f64); 2], width: f64) -> Tensor<f64> {
    Tensor::from_fn(&[16, 16, 2], |i| {
        let (y, x, k) = (i / 32, (i / 2) % 16, i % 2);
        let (cy, cx) = centers[k];
        (-((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / (2.0 * width * width)).exp()
    })
}

fn main() -> ctcal::Result<()> {
    let weights = CtcalWeights::default();
    let ae = AttnAutoencoder::<f64>::new(AutoencoderConfig::default(), 16, 1)?;
    let teacher = blobs([(4.0, 4.0), (11.0, 11.0)], 2.0);
    let students = [
        ("identical", blobs([(4.0, 4.0), (11.0, 11.0)], 2.0)),
        ("blurred", blobs([(4.0, 4.0), (11.0, 11.0)], 5.0)),
        ("shifted", blobs([(7.0, 7.0), (9.0, 9.0)], 2.0)),
        ("one weak", {
            let mut t = blobs([(4.0, 4.0), (11.0, 11.0)], 2.0);
            t.data_mut().iter_mut().skip(1).step_by(2).for_each(|v| *v *= 0.3);
            t
        }),
    ];
    println!("{:<10} {:>9} {:>9} {:>9} {:>9} {:>9}", "student", "pixel", "semantic", "recon", "subject", "weighted");
    for (name, student) in students {
        let mut g = Graph::new();
        let bind = AeBinding::new(&mut g, &ae, true);
        let a_stu = g.leaf(student);
        let a_tea = g.constant(teacher.clone());
        let terms = ctcal_terms(&mut g, &ae, &bind, a_stu, a_tea, &[0, 1], &weights, TermSet::ALL, true)?;
        let [p, s, r, reg] = terms.values(&g);
        let total = terms.weighted_sum(&mut g, &weights).map(|v| g.value(v).item()).unwrap_or(0.0);
        println!("{name:<10} {p:>9.5} {s:>9.5} {r:>9.5} {reg:>9.5} {total:>9.5}");
    }

    // the calibration term is down-weighted linearly at low-noise student timesteps
    for t_stu in [100, 500, 1000] {
        println!("t_stu={t_stu}: total = {:.3}", compose_objective(0.05, 0.2, t_stu, 1000)?);
    }
    Ok(())
}
