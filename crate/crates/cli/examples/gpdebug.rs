use cellfree::gp::{GpProblem, Monomial, solve};

fn mono(c: f64) -> Monomial { Monomial::constant(c) }

fn main() {
    let mut p = GpProblem::new(1, mono(1.0).pow(0, 1.0));
    p.add_constraint(mono(2.0).pow(0, -1.0));
    let sol = solve(&p, 1e-9).unwrap();
    println!("solver {:?} {} at {:?}", sol.status, sol.objective, sol.values);

    let mut brackets = vec![(1e-3f64, 1e3f64)];
    let mut best = f64::INFINITY;
    for round in 0..8 {
        let axes: Vec<Vec<f64>> = brackets.iter().map(|&(lo, hi)| {
            let steps = ((hi / lo).log10() * 40.0).ceil().max(40.0) as usize;
            let ratio = (hi / lo).powf(1.0 / steps as f64);
            (0..=steps).map(|i| lo * ratio.powi(i as i32)).collect()
        }).collect();
        let mut best_point: Option<Vec<f64>> = None;
        for &x in &axes[0] {
            let xs = [x];
            if p.max_violation(&xs) <= 1e-9 {
                let v = p.objective.eval(&xs);
                if v < best { best = v; best_point = Some(xs.to_vec()); }
            }
        }
        println!("round {round}: best {best:.10} point {best_point:?} bracket {:?}", brackets[0]);
        match best_point {
            Some(point) => {
                brackets = brackets.iter().zip(&point).map(|(&(blo, bhi), &x)| {
                    let steps = ((bhi / blo).log10() * 40.0).ceil().max(40.0);
                    let width = (bhi / blo).powf(6.0 / steps);
                    (x / width, x * width)
                }).collect();
            }
            None => { println!("no improvement, break"); break; }
        }
    }
}
