//! The learned registration block Φ = Γ(Λ(t, g), g): momentum prediction
//! followed by shooting and warping of the template.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sofpidr::lddmm::{GaussianKernel, KernelConfig};
use sofpidr::phantoms::{make_pair, DeformSpec, PhantomSpec};
use sofpidr::regnets::{gamma_forward, phi_forward, GammaArch, LambdaArch, RegNet};
use sofpidr::{Result, Tensor};

fn main() -> Result<()> {
    let (h, w) = (32, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = RegNet::init(LambdaArch::default(), GammaArch::default(), 0, &mut rng);
    println!("Λ: {} scalars, Γ: {} scalars", net.theta1.num_scalars(), net.theta2.num_scalars());
    for spec in net.lambda_arch.layers() {
        println!("  Λ layer {spec:?}");
    }

    let (g, t) = make_pair(&PhantomSpec::new(h, w), &DeformSpec::new(h, w), (0.0, 0.5))?;
    let kernel = GaussianKernel::new(KernelConfig::for_grid(h, w), h, w)?;
    let (f, m) = phi_forward(&t, &g, &net, &kernel)?;
    println!("untrained Φ: ‖m‖∞ = {:.3e}, ‖f − g‖∞ = {:.3e}", m.max_abs(), f.max_abs_diff(&g)?);

    // Zero momentum and a zero residual head leave the template untouched.
    let id = gamma_forward(&Tensor::zeros(&[2, h, w]), &g, &net.gamma_arch, &kernel, &net.theta2)?;
    println!("Γ(0, g) = g: max difference {:.1e}", id.max_abs_diff(&g)?);
    Ok(())
}
