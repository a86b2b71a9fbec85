//! Cardiac-like phantoms: one contraction cycle and a template/target pair.

use sofpidr::eval::write_png;
use sofpidr::phantoms::{make_pair, render_phantom, DeformSpec, PhantomSpec};
use sofpidr::{Result, Tensor};

fn main() -> Result<()> {
    let (h, w) = (64, 64);
    let out = std::env::temp_dir().join("sofpidr-examples");
    std::fs::create_dir_all(&out).map_err(|e| sofpidr::Error::io(&out, e))?;

    let spec = PhantomSpec::new(h, w);
    let mut deform = DeformSpec::new(h, w);
    deform.amplitude = 0.2;
    println!("peak displacement {:.2} px", deform.max_displacement());

    // A strip of 8 phases across one cycle.
    let frames: Vec<Tensor> = (0..8).map(|k| render_phantom(&spec, &deform, k as f64 / 8.0)).collect::<Result<_>>()?;
    let mut strip = Tensor::zeros(&[h, 8 * w]);
    for (k, fr) in frames.iter().enumerate() {
        for i in 0..h {
            strip.data_mut()[i * 8 * w + k * w..i * 8 * w + (k + 1) * w].copy_from_slice(&fr.data()[i * w..(i + 1) * w]);
        }
    }
    write_png(out.join("phantom_cycle.png"), &strip)?;
    for (k, fr) in frames.iter().enumerate() {
        println!("phase {:.3}: level {:.3}, ‖frame − rest‖ = {:.3}", k as f64 / 8.0, deform.level(k as f64 / 8.0), fr.sub(&frames[0])?.norm());
    }

    let (g, f) = make_pair(&spec, &deform, (0.0, 0.5))?;
    println!("pair: ‖f − g‖² = {:.3}", f.sub(&g)?.norm_sq());
    write_png(out.join("pair_template.png"), &g)?;
    write_png(out.join("pair_target.png"), &f)?;
    println!("images written to {}", out.display());
    Ok(())
}
