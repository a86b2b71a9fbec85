//! Forward operators: sampling masks, masked Fourier and ray transforms,
//! the dot-product adjoint test and noisy measurement simulation.

use sofpidr::eval::write_png;
use sofpidr::operators::{adjoint_mismatch, make_mask, simulate_measurement, ForwardOperator, MaskPattern, NoiseModel};
use sofpidr::phantoms::{render_phantom, DeformSpec, PhantomSpec};
use sofpidr::Result;

fn main() -> Result<()> {
    let (h, w) = (64, 64);
    let out = std::env::temp_dir().join("sofpidr-examples");
    std::fs::create_dir_all(&out).map_err(|e| sofpidr::Error::io(&out, e))?;

    for pattern in [MaskPattern::Radial, MaskPattern::Random2d, MaskPattern::Random1dCartesian] {
        for rate in [0.2, 0.25, 1.0 / 3.0] {
            let mask = make_mask(pattern, rate, 4, 1, h, w)?;
            let op = ForwardOperator::masked_fourier(mask.clone(), false);
            println!(
                "{pattern:?} nominal {rate:.3} realised {:.3}  adjoint mismatch {:.1e}",
                mask.sampled_fraction(),
                adjoint_mismatch(&op, 10, 0)?
            );
            if rate == 0.25 {
                write_png(out.join(format!("mask_{pattern:?}.png")), &mask.to_tensor())?;
            }
        }
    }
    for views in [18, 181] {
        let op = ForwardOperator::ray_transform(h, w, views);
        println!("ray transform {views:>3} views  range {:?}  adjoint mismatch {:.1e}", op.range_shape(), adjoint_mismatch(&op, 5, 0)?);
    }

    let u = render_phantom(&PhantomSpec::new(h, w), &DeformSpec::new(h, w), 0.0)?;
    let op = ForwardOperator::ray_transform(h, w, 181);
    let y = simulate_measurement(&u, &op, &NoiseModel::for_operator(op.kind(), 0.1, 7))?;
    let clean = op.apply(&u)?;
    println!("low-dose sinogram noise energy {:.3}", y.sub(&clean)?.norm_sq() / clean.norm_sq());
    println!("masks written to {}", out.display());
    Ok(())
}
