//! Element-wise arctangent with a backward pass; candle has no native one.

use candle_core::{CpuStorage, CustomOp1, Layout, Result, Shape, Tensor};

struct Atan;

fn map<T: Copy>(data: &[T], layout: &Layout, f: impl Fn(T) -> T) -> Result<Vec<T>> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(data[start..end].iter().map(|&v| f(v)).collect()),
        None => candle_core::bail!("atan: input must be contiguous"),
    }
}

impl CustomOp1 for Atan {
    fn name(&self) -> &'static str {
        "atan"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(map(v, layout, f32::atan)?),
            CpuStorage::F64(v) => CpuStorage::F64(map(v, layout, f64::atan)?),
            _ => candle_core::bail!("atan: only f32 and f64 are supported"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        let denom = (arg.sqr()? + 1.0)?;
        Ok(Some(grad_res.div(&denom)?))
    }
}

pub fn atan(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Atan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn values_and_gradient() {
        let xs = [-3.0f64, -0.5, 0.0, 0.25, 2.0];
        let v = Var::new(&xs[..], &Device::Cpu).unwrap();
        let y = atan(v.as_tensor()).unwrap();
        let got: Vec<f64> = y.to_vec1().unwrap();
        for (g, x) in got.iter().zip(xs) {
            assert!((g - x.atan()).abs() < 1e-15);
        }
        let grads = y.sum_all().unwrap().backward().unwrap();
        let g: Vec<f64> = grads.get(v.as_tensor()).unwrap().to_vec1().unwrap();
        for (g, x) in g.iter().zip(xs) {
            let h = 1e-6;
            let fd = ((x + h).atan() - (x - h).atan()) / (2.0 * h);
            assert!((g - fd).abs() < 1e-8);
        }
        let t = Tensor::new(&[[1.0f32, 2.0], [3.0, 4.0]], &Device::Cpu).unwrap().t().unwrap();
        let r: Vec<Vec<f32>> = atan(&t).unwrap().to_vec2().unwrap();
        assert!((r[0][1] - 3.0f32.atan()).abs() < 1e-7);
    }
}
