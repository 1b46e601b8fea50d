//! Noise schedules, timestep samplers, and teacher-timestep strategies.

use ctcal::diffusion::{add_noise, prediction_target, NoiseSchedule, SamplerKind, TeacherStrategy, TimestepPair, TimestepSampler};
use ctcal::loss::timestep_weight;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> ctcal::Result<()> {
    let t_train = 1000;
    let ddpm = NoiseSchedule::ddpm(t_train);
    let rf = NoiseSchedule::rectified_flow(t_train);
    println!("{:>5} {:>10} {:>10} {:>10}", "t", "ddpm a_bar", "rf sigma", "lambda_t");
    for t in [0, 50, 250, 500, 750, 1000] {
        println!("{t:>5} {:>10.5} {:>10.3} {:>10.3}", ddpm.alpha_bar(t), rf.sigma(t), timestep_weight(t, t_train));
    }

    // one pixel through both forward processes
    let (x0, eps) = ([0.5f64], [1.0f64]);
    for t in [100, 900] {
        println!(
            "t={t}: ddpm x_t={:.4} target={:.4} | rf x_t={:.4} target={:.4}",
            add_noise(&x0, &eps, t, &ddpm)?[0],
            prediction_target(&x0, &eps, t, &ddpm)?[0],
            add_noise(&x0, &eps, t, &rf)?[0],
            prediction_target(&x0, &eps, t, &rf)?[0],
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (name, kind, strategy) in [
        ("uniform / fixed zero", SamplerKind::Uniform, TeacherStrategy::FixedZero),
        ("uniform / uniform below", SamplerKind::Uniform, TeacherStrategy::UniformBelow),
        ("logit-normal / density mode", SamplerKind::logit_normal_default(), TeacherStrategy::DensityMode),
    ] {
        let sampler = TimestepSampler::new(kind, t_train)?;
        let pairs: Vec<String> = (0..6)
            .map(|_| {
                let p = TimestepPair::sample(&sampler, strategy, &mut rng);
                format!("({},{})", p.t_stu, p.t_tea)
            })
            .collect();
        println!("{name:<28} (t_stu,t_tea): {}", pairs.join(" "));
    }
    Ok(())
}
