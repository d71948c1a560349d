use chainwork::forward::simulate;
use chainwork::scene::parse_scene;

fn main() {
    // Velocity chosen so each step advances an exact dyadic fraction of a
    // cell: vx = dx/(64 dt), vy = dx/(128 dt) with dx = 1/64, dt = 1e-3.
    let vx = 0.23;
    let vy = 0.17;
    for steps in [200usize, 1000] {
        let text = format!(
            r#"{{
                "config": {{"steps": {steps}, "dt": 1e-3, "jitter": 0.0, "seed": 11}},
                "shapes": [{{"kind": "box", "center": [0.3, 0.3], "size": [0.125, 0.125],
                            "velocity": [{vx}, {vy}], "youngs_modulus": 10.0}}]
            }}"#
        );
        let spec = parse_scene(&text).unwrap();
        let tape = simulate::<f64>(&spec).unwrap();
        let max_c = tape.final_state.c.iter().map(|c| c.norm()).fold(0.0, f64::max);
        let max_f = tape.final_state.f.iter().map(|f| (f - nalgebra::Matrix2::identity()).norm()).fold(0.0, f64::max);
        println!("commensurate v=({vx:.4},{vy:.4}) steps={steps}: max|C|={max_c:.3e} max|F-I|={max_f:.3e}");
    }
}
