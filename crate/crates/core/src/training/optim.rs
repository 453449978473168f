//! Adam with decoupled weight decay over the head parameters.

use crate::adaptation::{HeadGrads, ModelState};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr_adaptors: f64,
    pub lr_discriminator: f64,
    pub weight_decay: f64,
    step: u64,
    /// a, b, layer1, gamma, beta, layer2, bias
    moments: Vec<Moments>,
}

fn update(p: &mut [f64], g: &[f64], st: &mut Moments, lr: f64, wd: f64, bc1: f64, bc2: f64) {
    debug_assert_eq!(p.len(), g.len());
    for i in 0..p.len() {
        p[i] *= 1.0 - lr * wd;
        st.m[i] = BETA1 * st.m[i] + (1.0 - BETA1) * g[i];
        st.v[i] = BETA2 * st.v[i] + (1.0 - BETA2) * g[i] * g[i];
        let mhat = st.m[i] / bc1;
        let vhat = st.v[i] / bc2;
        p[i] -= lr * mhat / (vhat.sqrt() + EPS);
    }
}

impl AdamW {
    pub fn new(model: &ModelState, lr_adaptors: f64, lr_discriminator: f64, weight_decay: f64) -> Self {
        let d = &model.discriminator;
        let sizes = [
            model.adaptor_a.weight.len(),
            model.adaptor_b.weight.len(),
            d.layer1.len(),
            d.gamma.len(),
            d.beta.len(),
            d.layer2.len(),
            1,
        ];
        AdamW {
            lr_adaptors,
            lr_discriminator,
            weight_decay,
            step: 0,
            moments: sizes.iter().map(|&n| Moments::new(n)).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, model: &mut ModelState, g: &HeadGrads) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let wd = self.weight_decay;
        let (la, ld) = (self.lr_adaptors, self.lr_discriminator);
        let d = &mut model.discriminator;
        let [ma, mb, m1, mg, mbeta, m2, mbias] = &mut self.moments[..] else {
            unreachable!("seven parameter groups")
        };
        update(
            model.adaptor_a.weight.as_slice_mut().expect("standard layout"),
            g.adaptor_a.as_slice().expect("standard layout"),
            ma,
            la,
            wd,
            bc1,
            bc2,
        );
        update(
            model.adaptor_b.weight.as_slice_mut().expect("standard layout"),
            g.adaptor_b.as_slice().expect("standard layout"),
            mb,
            la,
            wd,
            bc1,
            bc2,
        );
        update(
            d.layer1.as_slice_mut().expect("standard layout"),
            g.layer1.as_slice().expect("standard layout"),
            m1,
            ld,
            wd,
            bc1,
            bc2,
        );
        update(d.gamma.as_slice_mut().unwrap(), g.gamma.as_slice().unwrap(), mg, ld, wd, bc1, bc2);
        update(d.beta.as_slice_mut().unwrap(), g.beta.as_slice().unwrap(), mbeta, ld, wd, bc1, bc2);
        update(d.layer2.as_slice_mut().unwrap(), g.layer2.as_slice().unwrap(), m2, ld, wd, bc1, bc2);
        update(std::slice::from_mut(&mut d.bias), &[g.bias], mbias, ld, wd, bc1, bc2);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adaptation::{init_model, HeadConfig};
    use crate::features::BackboneSpec;
    use ndarray::{Array1, Array2};

    fn zero_grads(m: &ModelState) -> HeadGrads {
        let hd = m.discriminator.hidden();
        HeadGrads {
            adaptor_a: Array2::zeros(m.adaptor_a.weight.dim()),
            adaptor_b: Array2::zeros(m.adaptor_b.weight.dim()),
            layer1: Array2::zeros(m.discriminator.layer1.dim()),
            gamma: Array1::zeros(hd),
            beta: Array1::zeros(hd),
            layer2: Array1::zeros(hd),
            bias: 0.0,
        }
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut m = init_model(HeadConfig { channels: 3, hidden: 2 }, BackboneSpec::default(), "", 0).unwrap();
        let before = m.clone();
        let mut opt = AdamW::new(&m, 1e-4, 2e-4, 1e-5);
        let g = zero_grads(&m);
        opt.step(&mut m, &g);
        let fa = 1.0 - 1e-4 * 1e-5;
        let fd = 1.0 - 2e-4 * 1e-5;
        assert_eq!(m.adaptor_a.weight, before.adaptor_a.weight.mapv(|v| v * fa));
        assert_eq!(m.discriminator.layer1, before.discriminator.layer1.mapv(|v| v * fd));
        assert_eq!(m.discriminator.bias, before.discriminator.bias * fd);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut m = init_model(HeadConfig { channels: 2, hidden: 2 }, BackboneSpec::default(), "", 0).unwrap();
        let before = m.clone();
        let mut g = zero_grads(&m);
        g.bias = 3.0;
        let mut opt = AdamW::new(&m, 1e-4, 2e-4, 0.0);
        opt.step(&mut m, &g);
        assert!((m.discriminator.bias - (before.discriminator.bias - 2e-4)).abs() < 1e-10);
        assert_eq!(m.adaptor_b, before.adaptor_b);
        assert_eq!(opt.steps_taken(), 1);
    }
}
