//! How an 8×8 token grid splits into 4×4 windows, plain and shifted by 2,
//! and which pairs the shifted layout has to mask.

use dimprune::nn::window::WindowSpec;

fn show(w: &WindowSpec) {
    let mut owner = vec![0usize; w.tokens()];
    for (k, win) in w.window_tokens().iter().enumerate() {
        for &t in win {
            owner[t] = k;
        }
    }
    for row in owner.chunks(w.width) {
        println!("  {}", row.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(" "));
    }
}

fn main() -> dimprune::Result<()> {
    let plain = WindowSpec::new(4, 0, 8, 8)?;
    println!("window of each token, no shift:");
    show(&plain);

    let shifted = WindowSpec::new(4, 2, 8, 8)?;
    println!("window of each token, shift 2:");
    show(&shifted);

    let blocked = shifted.blocked_pairs().expect("shifted layouts have a mask");
    let area = shifted.window_area();
    for k in 0..shifted.num_windows() {
        let n = blocked[k * area * area..(k + 1) * area * area]
            .iter()
            .filter(|b| **b)
            .count();
        println!("window {k}: {n} of {} pairs masked", area * area);
    }
    Ok(())
}
