use std::time::Instant;
use ddc_core::data;
use ddc_core::env::EnvConfig;
use ddc_core::model::{HyperConfig, ModelParams};
use ddc_core::objective::{self};
use ddc_core::rng::derive;

fn main() {
    let cfg = EnvConfig::default();
    let h = HyperConfig::default();
    let p = ModelParams::init(h.clone(), 1).unwrap();
    let mut r = derive(1, &[1]);
    let xs = data::generate_x(&cfg, 64, &mut r).unwrap();
    let ys = data::generate_y(&cfg, 16, &mut r).unwrap();
    let ex = objective::draw_x_noise(&h, 64, &mut r);
    let ey = objective::draw_y_noise(&h, 16, &mut r);
    // warmup
    let _ = objective::loss_and_grad(&xs, &ys, &p, 1.0, &ex, &ey).unwrap();
    let t0 = Instant::now();
    let n = 5;
    for _ in 0..n {
        let _ = objective::loss_and_grad(&xs, &ys, &p, 1.0, &ex, &ey).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / n as f64;
    println!("batch(64x+16y) loss_and_grad: {:.1} ms  => {:.2} ms/x-record", dt*1000.0, dt*1000.0/80.0);
    // forward only
    let t0 = Instant::now();
    for _ in 0..n {
        let _ = objective::total_loss(&xs, &ys, &p, 1.0, &ex, &ey).unwrap();
    }
    let dt_f = t0.elapsed().as_secs_f64() / n as f64;
    println!("forward only: {:.1} ms ({:.0}% of full)", dt_f*1000.0, 100.0*dt_f/dt);
}
