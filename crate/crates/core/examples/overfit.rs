use hyseg::network::{ModelConfig, Network};
use hyseg::training::run::train;
use hyseg::training::synthetic::SyntheticDataSpec;
use hyseg::training::TrainConfig;

fn main() {
    let t0 = std::time::Instant::now();
    let mut net = Network::<f32>::new(ModelConfig::default(), 0).unwrap();
    // constant-lr overfit recipe: cosine between equal endpoints
    let tcfg = TrainConfig {
        total_steps: 500,
        warmup_steps: Some(0),
        min_lr: 3e-4,
        weight_decay: 0.0,
        batch_size: 2,
        train_count: 2,
        val_count: 2,
        eval_every: 100,
        ..Default::default()
    };
    let dcfg = SyntheticDataSpec::default();
    let out = train(&mut net, &tcfg, &dcfg, 0, |row, _| {
        println!("step {:>4} lr {:.2e} loss {:.4} [{:.0}s]",
                 row.step, row.lr, row.loss, t0.elapsed().as_secs_f64());
        Ok(())
    }).unwrap();
    println!("final loss {:.4} in {:.1} min -> criterion(<0.05): {}",
             out.final_loss, t0.elapsed().as_secs_f64() / 60.0,
             if out.final_loss < 0.05 { "PASS" } else { "FAIL" });
}
