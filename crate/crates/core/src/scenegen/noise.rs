use ndarray::Array2;
use rand::Rng;

fn smoothstep(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// One octave of lattice value noise with smoothstep interpolation.
fn value_noise<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize, cells: usize) -> Array2<f32> {
    let cells = cells.max(1);
    let lattice = Array2::from_shape_fn((cells + 1, cells + 1), |_| rng.random::<f32>());
    Array2::from_shape_fn((height, width), |(i, j)| {
        let fy = i as f32 / height as f32 * cells as f32;
        let fx = j as f32 / width as f32 * cells as f32;
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (ty, tx) = (smoothstep(fy - y0 as f32), smoothstep(fx - x0 as f32));
        let a = lattice[(y0, x0)] * (1.0 - tx) + lattice[(y0, x0 + 1)] * tx;
        let b = lattice[(y0 + 1, x0)] * (1.0 - tx) + lattice[(y0 + 1, x0 + 1)] * tx;
        a * (1.0 - ty) + b * ty
    })
}

/// Fractal sum of value-noise octaves, normalised back to `[0, 1]`.
pub fn fractal_noise<R: Rng + ?Sized>(
    rng: &mut R,
    height: usize,
    width: usize,
    base_cells: usize,
    octaves: usize,
    persistence: f32,
) -> Array2<f32> {
    let mut acc = Array2::<f32>::zeros((height, width));
    let mut amp = 1.0f32;
    let mut total = 0.0f32;
    for k in 0..octaves.max(1) {
        let layer = value_noise(rng, height, width, base_cells << k);
        acc.scaled_add(amp, &layer);
        total += amp;
        amp *= persistence;
    }
    acc.mapv_inplace(|v| (v / total).clamp(0.0, 1.0));
    acc
}
