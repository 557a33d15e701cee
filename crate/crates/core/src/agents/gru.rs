use crate::numerics::{Axis, ParamId, ParamStore, Rng, Tape, Var};

/// GRU cell weights; gates laid out as [reset | update | candidate].
#[derive(Clone, Copy, Debug)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            w_ih: store.add_xavier(&format!("{prefix}.w_ih"), input, 3 * hidden, rng),
            w_hh: store.add_xavier(&format!("{prefix}.w_hh"), hidden, 3 * hidden, rng),
            b_ih: store.add_const(&format!("{prefix}.b_ih"), &[1, 3 * hidden], 0.0),
            b_hh: store.add_const(&format!("{prefix}.b_hh"), &[1, 3 * hidden], 0.0),
            hidden,
        }
    }

    /// One step for a batch: `x` is `B x input`, `h` is `B x hidden`.
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Var {
        let hd = self.hidden;
        let (w_ih, w_hh) = (tape.param(store, self.w_ih), tape.param(store, self.w_hh));
        let (b_ih, b_hh) = (tape.param(store, self.b_ih), tape.param(store, self.b_hh));
        let gi = tape.matmul(x, w_ih);
        let gi = tape.add(gi, b_ih);
        let gh = tape.matmul(h, w_hh);
        let gh = tape.add(gh, b_hh);
        let gi_r = tape.slice(gi, Axis::Cols, 0, hd);
        let gi_z = tape.slice(gi, Axis::Cols, hd, hd);
        let gi_n = tape.slice(gi, Axis::Cols, 2 * hd, hd);
        let gh_r = tape.slice(gh, Axis::Cols, 0, hd);
        let gh_z = tape.slice(gh, Axis::Cols, hd, hd);
        let gh_n = tape.slice(gh, Axis::Cols, 2 * hd, hd);
        let r = tape.add(gi_r, gh_r);
        let r = tape.sigmoid(r);
        let z = tape.add(gi_z, gh_z);
        let z = tape.sigmoid(z);
        let rn = tape.mul(r, gh_n);
        let n = tape.add(gi_n, rn);
        let n = tape.tanh(n);
        // h' = n + z * (h - n)
        let diff = tape.sub(h, n);
        let zd = tape.mul(z, diff);
        tape.add(n, zd)
    }
}
