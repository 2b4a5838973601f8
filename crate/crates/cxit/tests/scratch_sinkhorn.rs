use cxit::depth::TokenAnchors;
use cxit::numerics::{Matrix, Rng};
use cxit::width::{build_receivers, sender_capacities, sinkhorn_plan, utility_matrix, WidthParams};

#[test]
fn residual_survey() {
    const EPS: f64 = 0.2;
    for &(n, d) in &[(16usize, 16usize), (32, 16), (64, 16), (128, 16), (16, 4), (29, 4), (42, 4)] {
        let mut worst = 0.0f64;
        for seed in 0..40 {
            let mut rng = Rng::new(seed * 7 + 3);
            let k = n.div_ceil(4);
            let anchors = TokenAnchors {
                anchors: Matrix::from_fn(n, d, |_, _| rng.normal()),
                gates: Matrix::zeros(n, 1),
                context_mix: Matrix::zeros(n, d),
            };
            let params = WidthParams::init(d, d, EPS, 128, 200, 4, &Rng::new(seed + 1000));
            let receivers = build_receivers(&anchors, k).unwrap();
            let u = utility_matrix(&anchors, &receivers, &params).unwrap();
            let cost = u.map(|v| 1.0 - v);
            let rho = sender_capacities(&anchors, &params, 0..n).unwrap();
            let col = vec![1.0 / k as f64; k];
            let r = sinkhorn_plan(&cost, &rho, &col, EPS, 200).unwrap();
            worst = worst.max(r.row_residual);
        }
        println!("n {:4} d {:2}: worst residual over 40 seeds {:.3e}", n, d, worst);
    }
}
