//! The transferable sentence encoder: embedding lookup, a bidirectional LSTM,
//! and max pooling over time, plus a bit-exact binary container so a
//! pretrained encoder can move between tasks.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::autodiff::{Graph, Mode, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Weights of one LSTM direction. Gate blocks are stored contiguously in the
/// fixed order (input, forget, cell-candidate, output), each of size `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmDirectionParams {
    /// [4d, input_dim]
    pub w_x: Tensor,
    /// [4d, d]
    pub w_h: Tensor,
    /// [4d]
    pub b: Tensor,
}

impl LstmDirectionParams {
    pub fn param_count(&self) -> usize {
        self.w_x.numel() + self.w_h.numel() + self.b.numel()
    }
}

/// A bidirectional encoder; the pooled output lives in R^{2d}.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub forward: LstmDirectionParams,
    pub backward: LstmDirectionParams,
    pub d: usize,
    pub input_dim: usize,
}

impl EncoderParams {
    pub fn output_dim(&self) -> usize {
        2 * self.d
    }

    pub fn param_count(&self) -> usize {
        self.forward.param_count() + self.backward.param_count()
    }
}

fn init_direction(d: usize, input_dim: usize, bound: f64, rng: &mut Rng) -> LstmDirectionParams {
    let mut w_x = Tensor::zeros(vec![4 * d, input_dim]);
    let mut w_h = Tensor::zeros(vec![4 * d, d]);
    w_x.fill_uniform(rng, -bound, bound);
    w_h.fill_uniform(rng, -bound, bound);
    let mut b = Tensor::zeros(vec![4 * d]);
    // Forget-gate bias 1.0 helps early gradient flow; the forget block is the
    // second of the four gate blocks.
    for v in &mut b.data_mut()[d..2 * d] {
        *v = 1.0;
    }
    LstmDirectionParams { w_x, w_h, b }
}

/// Fresh encoder with weights uniform in (-1/sqrt(d), 1/sqrt(d)), zero biases
/// except the forget-gate block at 1.0. Deterministic in the seed; draw order
/// is forward W_x, forward W_h, backward W_x, backward W_h.
pub fn init_encoder(d: usize, input_dim: usize, rng: &mut Rng) -> Result<EncoderParams> {
    if d == 0 {
        return Err(Error::Parameter("encoder size d = 0".into()));
    }
    if input_dim == 0 {
        return Err(Error::Parameter("encoder input dimension 0".into()));
    }
    let bound = 1.0 / (d as f64).sqrt();
    Ok(EncoderParams {
        forward: init_direction(d, input_dim, bound, rng),
        backward: init_direction(d, input_dim, bound, rng),
        d,
        input_dim,
    })
}

/// Graph node ids of one direction's weights.
#[derive(Clone, Copy, Debug)]
pub struct DirectionNodes {
    pub w_x: NodeId,
    pub w_h: NodeId,
    pub b: NodeId,
}

/// Graph node ids of a whole encoder, in the canonical parameter order
/// forward (w_x, w_h, b) then backward (w_x, w_h, b).
#[derive(Clone, Copy, Debug)]
pub struct EncoderNodes {
    pub forward: DirectionNodes,
    pub backward: DirectionNodes,
    pub d: usize,
}

impl EncoderParams {
    /// Insert all six weight tensors as graph leaves.
    pub fn insert(&self, g: &mut Graph) -> EncoderNodes {
        let fwd = DirectionNodes {
            w_x: g.leaf(self.forward.w_x.clone()),
            w_h: g.leaf(self.forward.w_h.clone()),
            b: g.leaf(self.forward.b.clone()),
        };
        let bwd = DirectionNodes {
            w_x: g.leaf(self.backward.w_x.clone()),
            w_h: g.leaf(self.backward.w_h.clone()),
            b: g.leaf(self.backward.b.clone()),
        };
        EncoderNodes {
            forward: fwd,
            backward: bwd,
            d: self.d,
        }
    }
}

impl EncoderNodes {
    /// Node ids in the canonical parameter order.
    pub fn node_list(&self) -> [NodeId; 6] {
        [
            self.forward.w_x,
            self.forward.w_h,
            self.forward.b,
            self.backward.w_x,
            self.backward.w_h,
            self.backward.b,
        ]
    }
}

/// One LSTM step. Pre-activations are W_x x_t + W_h h_prev + b, split into
/// the four gate blocks; i, f, o pass through sigmoid, the cell candidate
/// through tanh; c = f (*) c_prev + i (*) g and h = o (*) tanh(c).
pub fn lstm_cell(
    g: &mut Graph,
    dir: DirectionNodes,
    d: usize,
    x_t: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
) -> Result<(NodeId, NodeId)> {
    let from_x = g.matvec(dir.w_x, x_t)?;
    let from_h = g.matvec(dir.w_h, h_prev)?;
    let linear = g.add(from_x, from_h)?;
    let pre = g.add(linear, dir.b)?;
    let i_gate = {
        let s = g.slice(pre, 0, d)?;
        g.sigmoid(s)
    };
    let f_gate = {
        let s = g.slice(pre, d, d)?;
        g.sigmoid(s)
    };
    let cand = {
        let s = g.slice(pre, 2 * d, d)?;
        g.tanh(s)
    };
    let o_gate = {
        let s = g.slice(pre, 3 * d, d)?;
        g.sigmoid(s)
    };
    let keep = g.hadamard(f_gate, c_prev)?;
    let write = g.hadamard(i_gate, cand)?;
    let c = g.add(keep, write)?;
    let c_act = g.tanh(c);
    let h = g.hadamard(o_gate, c_act)?;
    Ok((h, c))
}

fn run_direction(
    g: &mut Graph,
    dir: DirectionNodes,
    d: usize,
    steps: &[NodeId],
) -> Result<Vec<NodeId>> {
    let mut h = g.leaf(Tensor::zeros(vec![d]));
    let mut c = g.leaf(Tensor::zeros(vec![d]));
    let mut states = Vec::with_capacity(steps.len());
    for &x_t in steps {
        let (nh, nc) = lstm_cell(g, dir, d, x_t, h, c)?;
        h = nh;
        c = nc;
        states.push(nh);
    }
    Ok(states)
}

/// Encode token embedding nodes into a pooled sentence vector node.
///
/// Runs the forward direction left to right and the backward direction right
/// to left, each from fresh zero states; concatenates the two per-step states
/// into rows of a [T, 2d] matrix; takes the per-dimension max over steps; and
/// applies dropout to the pooled vector according to `mode`.
pub fn encode_steps(
    g: &mut Graph,
    enc: EncoderNodes,
    steps: &[NodeId],
    dropout_p: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<NodeId> {
    if steps.is_empty() {
        return Err(Error::Empty("encoding an empty token sequence".into()));
    }
    let fwd_states = run_direction(g, enc.forward, enc.d, steps)?;
    let rev: Vec<NodeId> = steps.iter().rev().copied().collect();
    let mut bwd_states = run_direction(g, enc.backward, enc.d, &rev)?;
    bwd_states.reverse(); // align with original positions
    let rows: Vec<NodeId> = fwd_states
        .iter()
        .zip(&bwd_states)
        .map(|(&f, &b)| g.concat(&[f, b], 0))
        .collect::<Result<_>>()?;
    let stacked = g.stack_rows(&rows)?;
    let pooled = g.max_over_time(stacked, None)?;
    g.dropout(pooled, dropout_p, mode, rng)
}

/// Embedding rows for a token index sequence, as graph nodes.
pub fn embed_tokens(g: &mut Graph, emb: NodeId, indices: &[usize]) -> Result<Vec<NodeId>> {
    indices.iter().map(|&i| g.row(emb, i)).collect()
}

/// Convenience wrapper: encode one sentence in a throwaway graph and return
/// the pooled vector. Deterministic in eval mode.
pub fn encode_sentence(
    enc: &EncoderParams,
    emb: &Tensor,
    indices: &[usize],
    dropout_p: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let emb_node = g.leaf(emb.clone());
    let nodes = enc.insert(&mut g);
    let steps = embed_tokens(&mut g, emb_node, indices)?;
    let out = encode_steps(&mut g, nodes, &steps, dropout_p, mode, rng)?;
    Ok(g.value(out).clone())
}

const MAGIC: &[u8; 8] = b"ARCTENC1";

/// Serialize to the container layout: magic `ARCTENC1`, little-endian u32
/// input_dim and d, then every weight as little-endian f64 in the order
/// forward W_x (row-major), forward W_h, forward b, backward W_x, backward
/// W_h, backward b. Byte-deterministic for given parameters.
pub fn container_bytes(enc: &EncoderParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * enc.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(enc.input_dim as u32).to_le_bytes());
    out.extend_from_slice(&(enc.d as u32).to_le_bytes());
    for dir in [&enc.forward, &enc.backward] {
        for t in [&dir.w_x, &dir.w_h, &dir.b] {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub(crate) fn take_f64s(bytes: &[u8], pos: &mut usize, n: usize, origin: &str) -> Result<Vec<f64>> {
    let need = n * 8;
    if *pos + need > bytes.len() {
        return Err(Error::Corrupt(format!(
            "{origin}: truncated at byte {} (need {need} more)",
            *pos
        )));
    }
    let out = bytes[*pos..*pos + need]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    *pos += need;
    Ok(out)
}

/// Parse a container starting at `*pos`, advancing it past the payload.
pub(crate) fn parse_container(bytes: &[u8], pos: &mut usize, origin: &str) -> Result<EncoderParams> {
    if *pos + 16 > bytes.len() || &bytes[*pos..*pos + 8] != MAGIC {
        return Err(Error::Format(format!(
            "{origin}: not an encoder container (bad magic)"
        )));
    }
    let input_dim =
        u32::from_le_bytes(bytes[*pos + 8..*pos + 12].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[*pos + 12..*pos + 16].try_into().expect("4 bytes")) as usize;
    if d == 0 || input_dim == 0 {
        return Err(Error::Corrupt(format!(
            "{origin}: declared dims d={d}, input_dim={input_dim}"
        )));
    }
    *pos += 16;
    let mut dirs = Vec::with_capacity(2);
    for _ in 0..2 {
        let w_x = take_f64s(bytes, pos, 4 * d * input_dim, origin)?;
        let w_h = take_f64s(bytes, pos, 4 * d * d, origin)?;
        let b = take_f64s(bytes, pos, 4 * d, origin)?;
        dirs.push(LstmDirectionParams {
            w_x: Tensor::new(vec![4 * d, input_dim], w_x)?,
            w_h: Tensor::new(vec![4 * d, d], w_h)?,
            b: Tensor::vector(b),
        });
    }
    let backward = dirs.pop().expect("two directions");
    let forward = dirs.pop().expect("two directions");
    Ok(EncoderParams {
        forward,
        backward,
        d,
        input_dim,
    })
}

/// Write the binary container to a file. See `container_bytes` for layout.
pub fn save_encoder(enc: &EncoderParams, path: &Path) -> Result<()> {
    let f = fs::File::create(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(f);
    w.write_all(&container_bytes(enc))
        .and_then(|_| w.flush())
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Exact inverse of `save_encoder`.
pub fn load_encoder(path: &Path) -> Result<EncoderParams> {
    let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let origin = path.display().to_string();
    let mut pos = 0;
    let enc = parse_container(&bytes, &mut pos, &origin)?;
    if pos != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{origin}: {} trailing bytes after declared payload",
            bytes.len() - pos
        )));
    }
    Ok(enc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn toy_encoder(seed: u64) -> EncoderParams {
        let mut rng = Rng::new(seed);
        init_encoder(3, 5, &mut rng).unwrap()
    }

    fn toy_embeddings(seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        let mut t = Tensor::zeros(vec![7, 5]);
        t.fill_uniform(&mut rng, -0.5, 0.5);
        t
    }

    #[test]
    fn init_shapes_and_biases() {
        let mut rng = Rng::new(1);
        let enc = init_encoder(4, 300, &mut rng).unwrap();
        assert_eq!(enc.forward.w_x.shape(), &[16, 300]);
        assert_eq!(enc.forward.w_h.shape(), &[16, 4]);
        assert_eq!(enc.forward.b.shape(), &[16]);
        assert_eq!(enc.output_dim(), 8);
        for dir in [&enc.forward, &enc.backward] {
            let b = dir.b.data();
            assert!(b[0..4].iter().all(|&v| v == 0.0));
            assert!(b[4..8].iter().all(|&v| v == 1.0), "forget block");
            assert!(b[8..16].iter().all(|&v| v == 0.0));
            let bound = 1.0 / 2.0;
            assert!(dir.w_x.data().iter().all(|&v| v.abs() < bound));
            assert!(dir.w_h.data().iter().all(|&v| v.abs() < bound));
        }
        assert!(init_encoder(0, 300, &mut rng).is_err());
        assert!(init_encoder(4, 0, &mut rng).is_err());
    }

    #[test]
    fn init_same_seed_bit_identical() {
        let a = toy_encoder(9);
        let b = toy_encoder(9);
        assert_eq!(a, b);
        let c = toy_encoder(10);
        assert_ne!(a, c);
    }

    #[test]
    fn cell_zero_params_zero_state() {
        let d = 3;
        let zero_dir = LstmDirectionParams {
            w_x: Tensor::zeros(vec![4 * d, 5]),
            w_h: Tensor::zeros(vec![4 * d, d]),
            b: Tensor::zeros(vec![4 * d]),
        };
        let mut g = Graph::new();
        let dir = DirectionNodes {
            w_x: g.leaf(zero_dir.w_x.clone()),
            w_h: g.leaf(zero_dir.w_h.clone()),
            b: g.leaf(zero_dir.b.clone()),
        };
        let x = g.leaf(Tensor::vector(vec![1.0, -2.0, 3.0, 0.5, 0.0]));
        let h0 = g.leaf(Tensor::zeros(vec![d]));
        let c0 = g.leaf(Tensor::zeros(vec![d]));
        let (h, c) = lstm_cell(&mut g, dir, d, x, h0, c0).unwrap();
        assert_eq!(g.value(h).data(), &[0.0; 3]);
        assert_eq!(g.value(c).data(), &[0.0; 3]);
    }

    #[test]
    fn cell_forget_bias_carries_state() {
        // Zero weights with forget bias 1: c = sigmoid(1) * c_prev.
        let d = 2;
        let mut b = Tensor::zeros(vec![4 * d]);
        for v in &mut b.data_mut()[d..2 * d] {
            *v = 1.0;
        }
        let mut g = Graph::new();
        let dir = DirectionNodes {
            w_x: g.leaf(Tensor::zeros(vec![4 * d, 3])),
            w_h: g.leaf(Tensor::zeros(vec![4 * d, d])),
            b: g.leaf(b),
        };
        let x = g.leaf(Tensor::vector(vec![1.0, 1.0, 1.0]));
        let h0 = g.leaf(Tensor::zeros(vec![d]));
        let c_prev = g.leaf(Tensor::vector(vec![2.0, -4.0]));
        let (_, c) = lstm_cell(&mut g, dir, d, x, h0, c_prev).unwrap();
        let sig1 = 1.0 / (1.0 + (-1.0f64).exp());
        let got = g.value(c).data();
        assert!((got[0] - sig1 * 2.0).abs() < 1e-12, "{got:?}");
        assert!((got[1] - sig1 * -4.0).abs() < 1e-12, "{got:?}");
        assert!((sig1 - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn cell_shape_mismatch() {
        let enc = toy_encoder(3);
        let mut g = Graph::new();
        let nodes = enc.insert(&mut g);
        let bad_x = g.leaf(Tensor::vector(vec![1.0; 4])); // input_dim is 5
        let h0 = g.leaf(Tensor::zeros(vec![3]));
        let c0 = g.leaf(Tensor::zeros(vec![3]));
        assert!(lstm_cell(&mut g, nodes.forward, 3, bad_x, h0, c0).is_err());
    }

    #[test]
    fn encode_single_token_is_that_state() {
        // With one step, pooling over time is the identity, so the output is
        // the concatenated pair of direction states for that step.
        let enc = toy_encoder(4);
        let emb = toy_embeddings(5);
        let mut rng = Rng::new(0);
        let pooled = encode_sentence(&enc, &emb, &[2], 0.0, Mode::Eval, &mut rng).unwrap();
        assert_eq!(pooled.numel(), 6);

        // Reproduce by hand: run each direction one step.
        let mut g = Graph::new();
        let emb_node = g.leaf(emb.clone());
        let nodes = enc.insert(&mut g);
        let x = g.row(emb_node, 2).unwrap();
        let h0 = g.leaf(Tensor::zeros(vec![3]));
        let c0 = g.leaf(Tensor::zeros(vec![3]));
        let (hf, _) = lstm_cell(&mut g, nodes.forward, 3, x, h0, c0).unwrap();
        let h0b = g.leaf(Tensor::zeros(vec![3]));
        let c0b = g.leaf(Tensor::zeros(vec![3]));
        let (hb, _) = lstm_cell(&mut g, nodes.backward, 3, x, h0b, c0b).unwrap();
        let both: Vec<f64> = g
            .value(hf)
            .data()
            .iter()
            .chain(g.value(hb).data())
            .copied()
            .collect();
        assert_eq!(pooled.data(), &both[..]);
    }

    #[test]
    fn encode_empty_rejected() {
        let enc = toy_encoder(4);
        let emb = toy_embeddings(5);
        let mut rng = Rng::new(0);
        let err = encode_sentence(&enc, &emb, &[], 0.0, Mode::Eval, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Empty(_)));
    }

    #[test]
    fn encode_eval_deterministic() {
        let enc = toy_encoder(8);
        let emb = toy_embeddings(9);
        let mut r1 = Rng::new(1);
        let mut r2 = Rng::new(999); // different rng must not matter in eval
        let a = encode_sentence(&enc, &emb, &[1, 3, 5], 0.5, Mode::Eval, &mut r1).unwrap();
        let b = encode_sentence(&enc, &emb, &[1, 3, 5], 0.5, Mode::Eval, &mut r2).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn mirrored_params_swap_direction_roles() {
        // Swapping the direction parameters and reversing the sentence must
        // exchange the two halves of the pooled output bit for bit: pooling
        // is order-free, and each direction then sees the identical step
        // sequence it saw before.
        let enc = toy_encoder(12);
        let mirrored = EncoderParams {
            forward: enc.backward.clone(),
            backward: enc.forward.clone(),
            d: enc.d,
            input_dim: enc.input_dim,
        };
        let emb = toy_embeddings(13);
        let mut rng = Rng::new(0);
        let tokens = [0, 2, 4, 6, 1];
        let reversed: Vec<usize> = tokens.iter().rev().copied().collect();
        let orig = encode_sentence(&enc, &emb, &tokens, 0.0, Mode::Eval, &mut rng).unwrap();
        let swapped =
            encode_sentence(&mirrored, &emb, &reversed, 0.0, Mode::Eval, &mut rng).unwrap();
        let d = enc.d;
        assert_eq!(orig.data()[..d], swapped.data()[d..]);
        assert_eq!(orig.data()[d..], swapped.data()[..d]);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let enc = toy_encoder(21);
        let emb = toy_embeddings(22);
        let tokens = [1, 4, 2];

        // Parameter order: six direction tensors then the embedding matrix.
        let params: Vec<Tensor> = vec![
            enc.forward.w_x.clone(),
            enc.forward.w_h.clone(),
            enc.forward.b.clone(),
            enc.backward.w_x.clone(),
            enc.backward.w_h.clone(),
            enc.backward.b.clone(),
            emb.clone(),
        ];
        let run = |p: &[Tensor]| -> (f64, Vec<Tensor>) {
            let mut g = Graph::new();
            let nodes = EncoderNodes {
                forward: DirectionNodes {
                    w_x: g.leaf(p[0].clone()),
                    w_h: g.leaf(p[1].clone()),
                    b: g.leaf(p[2].clone()),
                },
                backward: DirectionNodes {
                    w_x: g.leaf(p[3].clone()),
                    w_h: g.leaf(p[4].clone()),
                    b: g.leaf(p[5].clone()),
                },
                d: 3,
            };
            let emb_node = g.leaf(p[6].clone());
            let steps = embed_tokens(&mut g, emb_node, &tokens).unwrap();
            let mut rng = Rng::new(0);
            let out = encode_steps(&mut g, nodes, &steps, 0.0, Mode::Eval, &mut rng).unwrap();
            let loss = g.sum(out);
            let grads = g.backward(loss).unwrap();
            let mut gs: Vec<Tensor> = nodes
                .node_list()
                .iter()
                .map(|&n| grads.wrt(n).clone())
                .collect();
            gs.push(grads.wrt(emb_node).clone());
            (g.value(loss).item(), gs)
        };
        let (_, analytic) = run(&params);
        let err = grad_check(|p| run(p).0, &params, &analytic, 1e-5).unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn container_round_trip_and_format_errors() {
        let enc = toy_encoder(31);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.bin");
        save_encoder(&enc, &path).unwrap();

        // Size: magic + two u32 + 8 bytes per weight.
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 16 + 8 * enc.param_count());

        let reread = load_encoder(&path).unwrap();
        assert_eq!(enc, reread);

        // Byte determinism.
        let path2 = dir.path().join("enc2.bin");
        save_encoder(&enc, &path2).unwrap();
        assert_eq!(bytes, fs::read(&path2).unwrap());

        // Encoding before save and after load agree bit for bit.
        let emb = toy_embeddings(32);
        let mut rng = Rng::new(0);
        let before = encode_sentence(&enc, &emb, &[1, 2], 0.0, Mode::Eval, &mut rng).unwrap();
        let after = encode_sentence(&reread, &emb, &[1, 2], 0.0, Mode::Eval, &mut rng).unwrap();
        assert_eq!(before.data(), after.data());

        // Wrong magic.
        let bad = dir.path().join("bad.bin");
        fs::write(&bad, b"XXXXXXXX rest").unwrap();
        assert!(matches!(load_encoder(&bad), Err(Error::Format(_))));

        // Truncated payload.
        let trunc = dir.path().join("trunc.bin");
        fs::write(&trunc, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_encoder(&trunc), Err(Error::Corrupt(_))));

        // Trailing garbage.
        let long = dir.path().join("long.bin");
        let mut extended = bytes.clone();
        extended.extend_from_slice(&[0u8; 8]);
        fs::write(&long, &extended).unwrap();
        assert!(matches!(load_encoder(&long), Err(Error::Corrupt(_))));
    }
}
