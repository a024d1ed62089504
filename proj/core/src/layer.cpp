#include "emformer/layer.hpp"

#include <cmath>
#include <string>

#include "emformer/error.hpp"

namespace emformer {

template <typename Real>
LayerWeights<Real> LayerWeights<Real>::zeros(std::size_t d, std::size_t f) {
  LayerWeights w;
  w.w_q = Matrix<Real>(d, d);
  w.w_k = Matrix<Real>(d, d);
  w.w_v = Matrix<Real>(d, d);
  w.w_out = Matrix<Real>(d, d);
  w.w1 = Matrix<Real>(d, f);
  w.b1.assign(f, Real(0));
  w.w2 = Matrix<Real>(f, d);
  w.b2.assign(d, Real(0));
  for (auto* v : {&w.ln_attn_gain, &w.ln_attn_bias, &w.ln_ffn_gain, &w.ln_ffn_bias, &w.ln_out_gain,
                  &w.ln_out_bias}) {
    v->assign(d, Real(0));
  }
  return w;
}

template <typename Real>
std::size_t LayerWeights<Real>::parameter_count() const {
  std::size_t n = 0;
  for_each_tensor([&](std::string_view, std::span<const Real> v) { n += v.size(); });
  return n;
}

template <typename Real>
void LayerWeights<Real>::check(const ModelConfig& cfg) const {
  const std::size_t d = cfg.d_model, f = cfg.ffn_dim;
  auto expect = [](const Matrix<Real>& m, std::size_t r, std::size_t c, const char* name) {
    if (m.rows() != r || m.cols() != c) {
      throw ShapeError(std::string("layer weights: ") + name + " is " + std::to_string(m.rows()) + "x" +
                       std::to_string(m.cols()) + ", expected " + std::to_string(r) + "x" + std::to_string(c));
    }
  };
  expect(w_q, d, d, "w_q");
  expect(w_k, d, d, "w_k");
  expect(w_v, d, d, "w_v");
  expect(w_out, d, d, "w_out");
  expect(w1, d, f, "w1");
  expect(w2, f, d, "w2");
  if (b1.size() != f || b2.size() != d) throw ShapeError("layer weights: bias length mismatch");
  for (const auto* v : {&ln_attn_gain, &ln_attn_bias, &ln_ffn_gain, &ln_ffn_bias, &ln_out_gain, &ln_out_bias}) {
    if (v->size() != d) throw ShapeError("layer weights: layer-norm parameter length mismatch");
  }
  for_each_tensor([](std::string_view name, std::span<const Real> v) {
    for (Real x : v) {
      if (!std::isfinite(x)) throw ShapeError("layer weights: non-finite entry in " + std::string(name));
    }
  });
}

template <typename Real>
LayerWeights<Real>& LayerWeights<Real>::operator+=(const LayerWeights& other) {
  std::vector<std::span<const Real>> src;
  other.for_each_tensor([&](std::string_view, std::span<const Real> v) { src.push_back(v); });
  std::size_t idx = 0;
  for_each_tensor([&](std::string_view, std::span<Real> v) {
    const auto s = src[idx++];
    if (s.size() != v.size()) throw ShapeError("LayerWeights += shape mismatch");
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += s[i];
  });
  return *this;
}

template <typename Real>
Matrix<Real> summary_vector(const Matrix<Real>& centers_normed) {
  if (centers_normed.rows() == 0) throw EmptyInputError("summary_vector: empty center block");
  return row_mean(centers_normed, 0, centers_normed.rows());
}

namespace {

template <typename Real>
Matrix<Real> ffn_block(const Matrix<Real>& z, const LayerWeights<Real>& w, Real eps) {
  const Matrix<Real> u = layer_norm(z, w.ln_ffn_gain, w.ln_ffn_bias, eps);
  return layer_norm(ffn_apply(u, w.w1, w.b1, w.w2, w.b2) + z, w.ln_out_gain, w.ln_out_bias, eps);
}

template <typename Real>
struct SegmentCompute {
  Matrix<Real> y;
  std::optional<Matrix<Real>> memory;
  Matrix<Real> own_keys;
  Matrix<Real> own_values;
};

// Shared by the streaming and AM-TRF kernels: every row of x is a query,
// keys are [bank, cached, x]. The summary query (mean of the normed center
// rows) skips the bank.
template <typename Real>
SegmentCompute<Real> segment_forward(const Matrix<Real>& x, Range center_rows, const Matrix<Real>& bank,
                                     const Matrix<Real>* cached_k, const Matrix<Real>* cached_v, bool summary,
                                     const LayerWeights<Real>& w, const ModelConfig& cfg,
                                     SegmentProbe<Real>* probe) {
  const Real eps = static_cast<Real>(cfg.eps);
  const Matrix<Real> xh = layer_norm(x, w.ln_attn_gain, w.ln_attn_bias, eps);

  Matrix<Real> q_in = xh;
  if (summary) q_in.append_rows(summary_vector(xh.slice_rows(center_rows.begin, center_rows.end)));
  const Matrix<Real> q = matmul(q_in, w.w_q);

  SegmentCompute<Real> out;
  out.own_keys = matmul(xh, w.w_k);
  out.own_values = matmul(xh, w.w_v);
  Matrix<Real> bank_k, bank_v;
  if (bank.rows() > 0) {
    bank_k = matmul(bank, w.w_k);
    bank_v = matmul(bank, w.w_v);
  }
  const Matrix<Real> empty;
  const Matrix<Real> k = vstack({&bank_k, cached_k ? cached_k : &empty, &out.own_keys});
  const Matrix<Real> v = vstack({&bank_v, cached_v ? cached_v : &empty, &out.own_values});

  BoolMask mask(q.rows(), k.rows(), true);
  if (summary) {
    for (std::size_t j = 0; j < bank.rows(); ++j) mask.set(q.rows() - 1, j, false);
  }
  const Matrix<Real> a =
      multi_head_attention(q, k, v, mask, w.w_out, cfg.n_heads, probe ? &probe->probs : nullptr);
  if (probe) {
    probe->memory_keys = bank.rows();
    probe->has_summary = summary;
  }

  const Matrix<Real> z = a.slice_rows(0, x.rows()) + x;
  if (summary) out.memory = a.slice_rows(x.rows(), x.rows() + 1);
  out.y = ffn_block(z, w, eps);
  return out;
}

template <typename Real>
void require_width(const Matrix<Real>& m, std::size_t d, const char* what) {
  if (m.rows() > 0 && m.cols() != d) {
    throw ShapeError(std::string(what) + ": width " + std::to_string(m.cols()) + " != d_model " +
                     std::to_string(d));
  }
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename Real>
ParallelLayerOutput<Real> emformer_layer_parallel(const Matrix<Real>& centers, const Matrix<Real>& right_copies,
                                                  const Matrix<Real>* memory, const LayerWeights<Real>& w,
                                                  const SegmentLayout& layout, const AttentionMaskSet& masks,
                                                  const ModelConfig& cfg, ParallelLayerTrace<Real>* trace) {
  const std::size_t d = cfg.d_model;
  const Real eps = static_cast<Real>(cfg.eps);
  if (centers.rows() != layout.total_frames || centers.cols() != d) {
    throw ShapeError("emformer_layer_parallel: centers do not match layout");
  }
  if (right_copies.rows() != layout.hardcopy_total || right_copies.cols() != d) {
    throw ShapeError("emformer_layer_parallel: right copies do not match layout");
  }
  if (masks.segments.size() != layout.n_segments()) {
    throw ShapeError("emformer_layer_parallel: mask set does not match layout");
  }
  const bool mem_keys = memory != nullptr;
  if (mem_keys && (memory->rows() != layout.n_segments() || memory->cols() != d)) {
    throw ShapeError("emformer_layer_parallel: memory must have one row per segment");
  }

  const Matrix<Real> cn = layer_norm(centers, w.ln_attn_gain, w.ln_attn_bias, eps);
  const Matrix<Real> rn = layer_norm(right_copies, w.ln_attn_gain, w.ln_attn_bias, eps);
  const Matrix<Real> qc = matmul(cn, w.w_q), kc = matmul(cn, w.w_k), vc = matmul(cn, w.w_v);
  const Matrix<Real> qr = matmul(rn, w.w_q), kr = matmul(rn, w.w_k), vr = matmul(rn, w.w_v);
  Matrix<Real> km, vm;
  if (mem_keys) {
    km = matmul(*memory, w.w_k);
    vm = matmul(*memory, w.w_v);
  }

  Matrix<Real> attn_c(centers.rows(), d), attn_r(right_copies.rows(), d);
  ParallelLayerOutput<Real> out;
  if (cfg.has_memory()) out.memory = Matrix<Real>(layout.n_segments(), d);
  if (trace) {
    trace->center_keys = kc;
    trace->center_values = vc;
    trace->probes.clear();
  }

  for (std::size_t i = 0; i < layout.n_segments(); ++i) {
    const SegmentKeys& keys = masks.segments[i];
    Matrix<Real> q = qc.slice_rows(keys.center.begin, keys.center.end);
    q.append_rows(qr.slice_rows(keys.right.begin, keys.right.end));
    if (keys.summary) q.append_rows(matmul(row_mean(cn, keys.center.begin, keys.center.end), w.w_q));

    Matrix<Real> k(0, d), v(0, d);
    if (mem_keys) {
      k.append_rows(km.slice_rows(keys.memory.begin, keys.memory.end));
      v.append_rows(vm.slice_rows(keys.memory.begin, keys.memory.end));
    }
    k.append_rows(kc.slice_rows(keys.left.begin, keys.left.end));
    v.append_rows(vc.slice_rows(keys.left.begin, keys.left.end));
    k.append_rows(kc.slice_rows(keys.center.begin, keys.center.end));
    v.append_rows(vc.slice_rows(keys.center.begin, keys.center.end));
    k.append_rows(kr.slice_rows(keys.right.begin, keys.right.end));
    v.append_rows(vr.slice_rows(keys.right.begin, keys.right.end));

    SegmentProbe<Real> probe;
    const Matrix<Real> a = multi_head_attention(q, k, v, keys.local_mask(mem_keys), w.w_out, cfg.n_heads,
                                                trace ? &probe.probs : nullptr);
    if (trace) {
      probe.segment = i;
      probe.memory_keys = mem_keys ? keys.memory.size() : 0;
      probe.has_summary = keys.summary;
      trace->probes.push_back(std::move(probe));
    }
    const std::size_t nc = keys.center.size(), nr = keys.right.size();
    attn_c.set_rows_at(keys.center.begin, a.slice_rows(0, nc));
    attn_r.set_rows_at(keys.right.begin, a.slice_rows(nc, nc + nr));
    if (keys.summary) out.memory.set_rows_at(i, a.slice_rows(nc + nr, nc + nr + 1));
  }

  const Matrix<Real> zc = attn_c + centers;
  const Matrix<Real> zr = attn_r + right_copies;
  const Matrix<Real> y = ffn_block(vstack({&zc, &zr}), w, eps);
  out.centers = y.slice_rows(0, zc.rows());
  out.right_copies = y.slice_rows(zc.rows(), y.rows());
  return out;
}

template <typename Real>
ParallelLayerGrads<Real> emformer_layer_parallel_vjp(const Matrix<Real>& centers,
                                                     const Matrix<Real>& right_copies,
                                                     const Matrix<Real>* memory, const LayerWeights<Real>& w,
                                                     const SegmentLayout& layout,
                                                     const AttentionMaskSet& masks, const ModelConfig& cfg,
                                                     const Matrix<Real>& d_centers_out,
                                                     const Matrix<Real>& d_right_out,
                                                     const Matrix<Real>& d_memory_out) {
  const std::size_t d = cfg.d_model;
  const Real eps = static_cast<Real>(cfg.eps);
  const std::size_t t = centers.rows(), h = right_copies.rows();
  const bool mem_keys = memory != nullptr;
  if (d_centers_out.rows() != t || d_right_out.rows() != h) {
    throw ShapeError("emformer_layer_parallel_vjp: cotangent shape mismatch");
  }

  // Recompute the forward intermediates.
  const Matrix<Real> cn = layer_norm(centers, w.ln_attn_gain, w.ln_attn_bias, eps);
  const Matrix<Real> rn = layer_norm(right_copies, w.ln_attn_gain, w.ln_attn_bias, eps);
  const Matrix<Real> qc = matmul(cn, w.w_q), kc = matmul(cn, w.w_k), vc = matmul(cn, w.w_v);
  const Matrix<Real> qr = matmul(rn, w.w_q), kr = matmul(rn, w.w_k), vr = matmul(rn, w.w_v);
  Matrix<Real> km, vm;
  if (mem_keys) {
    km = matmul(*memory, w.w_k);
    vm = matmul(*memory, w.w_v);
  }

  struct SegmentTensors {
    Matrix<Real> q, k, v, summary;
    BoolMask mask;
  };
  auto assemble = [&](std::size_t i) {
    const SegmentKeys& keys = masks.segments[i];
    SegmentTensors s;
    s.q = qc.slice_rows(keys.center.begin, keys.center.end);
    s.q.append_rows(qr.slice_rows(keys.right.begin, keys.right.end));
    if (keys.summary) {
      s.summary = row_mean(cn, keys.center.begin, keys.center.end);
      s.q.append_rows(matmul(s.summary, w.w_q));
    }
    s.k = Matrix<Real>(0, d);
    s.v = Matrix<Real>(0, d);
    if (mem_keys) {
      s.k.append_rows(km.slice_rows(keys.memory.begin, keys.memory.end));
      s.v.append_rows(vm.slice_rows(keys.memory.begin, keys.memory.end));
    }
    for (const auto& [src_k, src_v, range] :
         {std::tuple{&kc, &vc, keys.left}, std::tuple{&kc, &vc, keys.center}, std::tuple{&kr, &vr, keys.right}}) {
      s.k.append_rows(src_k->slice_rows(range.begin, range.end));
      s.v.append_rows(src_v->slice_rows(range.begin, range.end));
    }
    s.mask = keys.local_mask(mem_keys);
    return s;
  };

  Matrix<Real> attn_c(t, d), attn_r(h, d);
  for (std::size_t i = 0; i < layout.n_segments(); ++i) {
    const SegmentKeys& keys = masks.segments[i];
    const SegmentTensors s = assemble(i);
    const Matrix<Real> a = multi_head_attention(s.q, s.k, s.v, s.mask, w.w_out, cfg.n_heads);
    attn_c.set_rows_at(keys.center.begin, a.slice_rows(0, keys.center.size()));
    attn_r.set_rows_at(keys.right.begin, a.slice_rows(keys.center.size(), keys.center.size() + keys.right.size()));
  }
  const Matrix<Real> zc = attn_c + centers;
  const Matrix<Real> zr = attn_r + right_copies;
  const Matrix<Real> z = vstack({&zc, &zr});
  const Matrix<Real> u = layer_norm(z, w.ln_ffn_gain, w.ln_ffn_bias, eps);
  const Matrix<Real> pre_out = ffn_apply(u, w.w1, w.b1, w.w2, w.b2) + z;

  ParallelLayerGrads<Real> g;
  g.weights = LayerWeights<Real>::zeros(d, cfg.ffn_dim);

  // Output layer norm and FFN block.
  const Matrix<Real> dy = vstack({&d_centers_out, &d_right_out});
  auto ln_out = layer_norm_vjp(pre_out, w.ln_out_gain, eps, dy);
  g.weights.ln_out_gain = std::move(ln_out.dgain);
  g.weights.ln_out_bias = std::move(ln_out.dbias);
  auto fg = ffn_vjp(u, w.w1, w.b1, w.w2, ln_out.dx);
  g.weights.w1 = std::move(fg.dw1);
  g.weights.b1 = std::move(fg.db1);
  g.weights.w2 = std::move(fg.dw2);
  g.weights.b2 = std::move(fg.db2);
  auto ln_ffn = layer_norm_vjp(z, w.ln_ffn_gain, eps, fg.dx);
  g.weights.ln_ffn_gain = std::move(ln_ffn.dgain);
  g.weights.ln_ffn_bias = std::move(ln_ffn.dbias);
  Matrix<Real> dz = ln_out.dx;
  dz += ln_ffn.dx;

  // Attention residual: z = attn + x.
  const Matrix<Real> dattn_c = dz.slice_rows(0, t);
  const Matrix<Real> dattn_r = dz.slice_rows(t, t + h);
  g.centers = dattn_c;
  g.right_copies = dattn_r;

  Matrix<Real> dqc(t, d), dkc(t, d), dvc(t, d), dqr(h, d), dkr(h, d), dvr(h, d);
  Matrix<Real> dcn(t, d);
  Matrix<Real> dkm, dvm;
  if (mem_keys) {
    dkm = Matrix<Real>(memory->rows(), d);
    dvm = Matrix<Real>(memory->rows(), d);
  }
  const bool have_dmem = d_memory_out.rows() > 0;

  for (std::size_t i = 0; i < layout.n_segments(); ++i) {
    const SegmentKeys& keys = masks.segments[i];
    const SegmentTensors s = assemble(i);
    const std::size_t nc = keys.center.size(), nr = keys.right.size();
    Matrix<Real> dout = dattn_c.slice_rows(keys.center.begin, keys.center.end);
    dout.append_rows(dattn_r.slice_rows(keys.right.begin, keys.right.end));
    if (keys.summary) {
      dout.append_rows(have_dmem ? d_memory_out.slice_rows(i, i + 1) : Matrix<Real>(1, d));
    }
    auto ag = multi_head_attention_vjp(s.q, s.k, s.v, s.mask, w.w_out, cfg.n_heads, dout);
    g.weights.w_out += ag.dw_out;

    dqc.add_rows_at(keys.center.begin, ag.dq.slice_rows(0, nc));
    dqr.add_rows_at(keys.right.begin, ag.dq.slice_rows(nc, nc + nr));
    if (keys.summary) {
      const Matrix<Real> dqs = ag.dq.slice_rows(nc + nr, nc + nr + 1);
      g.weights.w_q += matmul_tn(s.summary, dqs);
      Matrix<Real> ds = matmul_nt(dqs, w.w_q);
      for (auto& x : ds.data()) x /= static_cast<Real>(nc);
      for (std::size_t f = keys.center.begin; f < keys.center.end; ++f) dcn.add_rows_at(f, ds);
    }

    std::size_t off = 0;
    auto take = [&](std::size_t n) {
      auto pair = std::pair{ag.dk.slice_rows(off, off + n), ag.dv.slice_rows(off, off + n)};
      off += n;
      return pair;
    };
    if (mem_keys) {
      auto [dk, dv] = take(keys.memory.size());
      dkm.add_rows_at(keys.memory.begin, dk);
      dvm.add_rows_at(keys.memory.begin, dv);
    }
    {
      auto [dk, dv] = take(keys.left.size());
      dkc.add_rows_at(keys.left.begin, dk);
      dvc.add_rows_at(keys.left.begin, dv);
    }
    {
      auto [dk, dv] = take(keys.center.size());
      dkc.add_rows_at(keys.center.begin, dk);
      dvc.add_rows_at(keys.center.begin, dv);
    }
    {
      auto [dk, dv] = take(keys.right.size());
      dkr.add_rows_at(keys.right.begin, dk);
      dvr.add_rows_at(keys.right.begin, dv);
    }
  }

  // Projections.
  g.weights.w_q += matmul_tn(cn, dqc);
  g.weights.w_k += matmul_tn(cn, dkc);
  g.weights.w_v += matmul_tn(cn, dvc);
  dcn += matmul_nt(dqc, w.w_q);
  dcn += matmul_nt(dkc, w.w_k);
  dcn += matmul_nt(dvc, w.w_v);
  Matrix<Real> drn(h, d);
  if (h > 0) {
    g.weights.w_q += matmul_tn(rn, dqr);
    g.weights.w_k += matmul_tn(rn, dkr);
    g.weights.w_v += matmul_tn(rn, dvr);
    drn += matmul_nt(dqr, w.w_q);
    drn += matmul_nt(dkr, w.w_k);
    drn += matmul_nt(dvr, w.w_v);
  }
  if (mem_keys) {
    g.weights.w_k += matmul_tn(*memory, dkm);
    g.weights.w_v += matmul_tn(*memory, dvm);
    g.memory = matmul_nt(dkm, w.w_k);
    g.memory += matmul_nt(dvm, w.w_v);
  }

  // Attention layer norm, shared by centers and right copies.
  auto ln_c = layer_norm_vjp(centers, w.ln_attn_gain, eps, dcn);
  g.centers += ln_c.dx;
  g.weights.ln_attn_gain = std::move(ln_c.dgain);
  g.weights.ln_attn_bias = std::move(ln_c.dbias);
  if (h > 0) {
    auto ln_r = layer_norm_vjp(right_copies, w.ln_attn_gain, eps, drn);
    g.right_copies += ln_r.dx;
    for (std::size_t j = 0; j < d; ++j) {
      g.weights.ln_attn_gain[j] += ln_r.dgain[j];
      g.weights.ln_attn_bias[j] += ln_r.dbias[j];
    }
  }
  return g;
}

// ---------------------------------------------------------------------------

template <typename Real>
LayerStreamState<Real>::LayerStreamState(const ModelConfig& cfg, bool record_inputs)
    : keys(cfg.left_frames, cfg.d_model),
      values(cfg.left_frames, cfg.d_model),
      bank(cfg.memory_size, cfg.d_model) {
  if (record_inputs) inputs.emplace(cfg.left_frames, cfg.d_model);
}

template <typename Real>
StreamStepOutput<Real> emformer_layer_stream_step(LayerStreamState<Real>& state, const Matrix<Real>& centers,
                                                  const Matrix<Real>& right, const LayerWeights<Real>& w,
                                                  const ModelConfig& cfg, SegmentProbe<Real>* probe) {
  const std::size_t d = cfg.d_model;
  if (centers.rows() == 0) throw EmptyInputError("emformer_layer_stream_step: empty center block");
  if (centers.rows() > cfg.center_frames || right.rows() > cfg.right_frames) {
    throw ShapeError("emformer_layer_stream_step: block longer than configured");
  }
  require_width(centers, d, "emformer_layer_stream_step centers");
  require_width(right, d, "emformer_layer_stream_step right context");
  if (state.keys.dim() != d || state.values.dim() != d || state.keys.capacity() != cfg.left_frames) {
    throw ShapeError("emformer_layer_stream_step: cache does not match config");
  }

  const Matrix<Real> x = vstack({&centers, &right});
  const Matrix<Real> cached_k = state.keys.to_matrix();
  const Matrix<Real> cached_v = state.values.to_matrix();
  const Matrix<Real> bank = state.bank.vectors();
  auto seg = segment_forward(x, Range{0, centers.rows()}, bank, &cached_k, &cached_v, cfg.has_memory(), w, cfg,
                             probe);

  for (std::size_t i = 0; i < centers.rows(); ++i) {
    state.keys.push(seg.own_keys.row(i));
    state.values.push(seg.own_values.row(i));
    if (state.inputs) state.inputs->push(centers.row(i));
  }

  StreamStepOutput<Real> out;
  out.centers = seg.y.slice_rows(0, centers.rows());
  out.right = seg.y.slice_rows(centers.rows(), x.rows());
  out.memory = std::move(seg.memory);
  return out;
}

template <typename Real>
AmtrfStepOutput<Real> amtrf_layer_step(const Matrix<Real>& x, const BlockSplit& split, const Matrix<Real>& bank,
                                       const LayerWeights<Real>& w, const ModelConfig& cfg,
                                       SegmentProbe<Real>* probe) {
  if (x.rows() != split.total()) throw ShapeError("amtrf_layer_step: block split does not cover input");
  if (split.center == 0) throw EmptyInputError("amtrf_layer_step: empty center block");
  require_width(x, cfg.d_model, "amtrf_layer_step input");
  require_width(bank, cfg.d_model, "amtrf_layer_step memory bank");
  auto seg = segment_forward(x, Range{split.left, split.left + split.center}, bank,
                             static_cast<const Matrix<Real>*>(nullptr), static_cast<const Matrix<Real>*>(nullptr),
                             cfg.has_memory(), w, cfg, probe);
  AmtrfStepOutput<Real> out;
  out.left = seg.y.slice_rows(0, split.left);
  out.centers = seg.y.slice_rows(split.left, split.left + split.center);
  out.right = seg.y.slice_rows(split.left + split.center, split.total());
  out.memory = std::move(seg.memory);
  return out;
}

#define EMFORMER_INSTANTIATE_LAYER(Real)                                                                     \
  template struct LayerWeights<Real>;                                                                        \
  template struct LayerStreamState<Real>;                                                                    \
  template Matrix<Real> summary_vector(const Matrix<Real>&);                                                 \
  template ParallelLayerOutput<Real> emformer_layer_parallel(                                                \
      const Matrix<Real>&, const Matrix<Real>&, const Matrix<Real>*, const LayerWeights<Real>&,              \
      const SegmentLayout&, const AttentionMaskSet&, const ModelConfig&, ParallelLayerTrace<Real>*);         \
  template ParallelLayerGrads<Real> emformer_layer_parallel_vjp(                                             \
      const Matrix<Real>&, const Matrix<Real>&, const Matrix<Real>*, const LayerWeights<Real>&,              \
      const SegmentLayout&, const AttentionMaskSet&, const ModelConfig&, const Matrix<Real>&,                \
      const Matrix<Real>&, const Matrix<Real>&);                                                             \
  template StreamStepOutput<Real> emformer_layer_stream_step(LayerStreamState<Real>&, const Matrix<Real>&,   \
                                                             const Matrix<Real>&, const LayerWeights<Real>&, \
                                                             const ModelConfig&, SegmentProbe<Real>*);       \
  template AmtrfStepOutput<Real> amtrf_layer_step(const Matrix<Real>&, const BlockSplit&, const Matrix<Real>&, \
                                                  const LayerWeights<Real>&, const ModelConfig&,             \
                                                  SegmentProbe<Real>*);

EMFORMER_INSTANTIATE_LAYER(float)
EMFORMER_INSTANTIATE_LAYER(double)

}  // namespace emformer
