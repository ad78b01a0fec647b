use crate::autodiff::{Tape, Tensor};
use crate::rng::{pair_index, stream, Purpose};

use super::{rollout_from_tape, Rollout, Task, TrainError};
use rand::Rng;

/// One binary outcome with `p(y = 1) = sigmoid(c)` and loss `L = y`.
/// The loss has no pathwise dependence on `c`, so only the score-function
/// term carries the gradient `dE[L]/dc = sigmoid'(c)`.
#[derive(Clone, Copy, Debug)]
pub struct BernoulliToy {
    pub seed: u64,
}

impl Task for BernoulliToy {
    fn rollout(&self, params: &[f64], iteration: usize, slot: usize) -> Result<Rollout, TrainError> {
        let mut rng = stream(self.seed, Purpose::TrainEpisode, pair_index(iteration as u64, slot as u64));
        let mut tape = Tape::new();
        let c = tape.leaf(Tensor::scalar(params[0]), true)?;
        let p1 = tape.sigmoid(c)?;
        let y = rng.random::<f64>() < tape.item(p1);
        let log_prob = if y {
            tape.log(p1)?
        } else {
            let one = tape.scalar(1.0)?;
            let p0 = tape.sub(one, p1)?;
            tape.log(p0)?
        };
        let loss = tape.scalar(if y { 1.0 } else { 0.0 })?;
        rollout_from_tape(&mut tape, &[c], loss, log_prob)
    }

    fn seed(&self) -> u64 {
        self.seed
    }
}
