#include "hsd/trainer.hpp"

#include "hsd/errors.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <ostream>
#include <random>

namespace hsd {

namespace fs = std::filesystem;

bool apply_determinism_from_env() {
  const char* v = std::getenv("HSD_DETERMINISTIC");
  if (!v || std::string(v) != "1") return false;
  torch::set_num_threads(1);
  at::globalContext().setDeterministicAlgorithms(true, false);
  return true;
}

Detector build_detector(const DetectorSpec& spec, int64_t seed) {
  torch::manual_seed(static_cast<uint64_t>(seed));
  return Detector(spec);
}

namespace {

struct Batch {
  torch::Tensor images;
  std::vector<torch::Tensor> gt_boxes;
  std::vector<torch::Tensor> gt_labels;
};

Batch make_batch(const std::vector<AnnotatedImage>& data, const std::vector<size_t>& idx, size_t begin, size_t end,
                 bool train_mode, const DatasetStats& stats, const PreprocessOptions& popts, std::mt19937_64& rng) {
  Batch b;
  std::vector<torch::Tensor> imgs;
  for (size_t k = begin; k < end; ++k) {
    auto p = preprocess(data[idx[k]], train_mode, stats, popts, rng);
    imgs.push_back(p.image);
    auto boxes = torch::zeros({static_cast<int64_t>(p.boxes.size()), 4});
    auto labels = torch::zeros({static_cast<int64_t>(p.boxes.size())}, torch::kInt64);
    auto ba = boxes.accessor<float, 2>();
    auto la = labels.accessor<int64_t, 1>();
    for (size_t j = 0; j < p.boxes.size(); ++j) {
      ba[j][0] = p.boxes[j].x1;
      ba[j][1] = p.boxes[j].y1;
      ba[j][2] = p.boxes[j].x2;
      ba[j][3] = p.boxes[j].y2;
      la[j] = p.boxes[j].class_id;
    }
    b.gt_boxes.push_back(boxes);
    b.gt_labels.push_back(labels);
  }
  b.images = torch::stack(imgs);
  return b;
}

std::vector<int64_t> level_strides_of(const HeadOutput& out) {
  std::vector<int64_t> s;
  int64_t offset = 0;
  for (auto n : out.level_sizes) {
    s.push_back(static_cast<int64_t>(out.strides[offset].item<float>()));
    offset += n;
  }
  return s;
}

// Batch norm layers keep their population statistics (used when starting from trained weights).
void freeze_batch_norm(torch::nn::Module& model) {
  for (auto& m : model.modules(/*include_self=*/false)) {
    if (m->as<torch::nn::BatchNorm2d>()) m->eval();
  }
}

struct StepTerms {
  LossTerms terms;
  int64_t clamped = 0;
};

StepTerms build_terms(const HeadOutput& out, const Batch& batch, const HeadSpec& hs, const torch::Tensor& teacher_edges,
                      double tau) {
  const int64_t N = batch.images.size(0);
  const int64_t C = hs.num_classes;
  const auto level_strides = level_strides_of(out);

  std::vector<torch::Tensor> labels, targets;
  for (int64_t i = 0; i < N; ++i) {
    auto a = assign_targets(out.locations, out.strides, out.level_sizes, level_strides, batch.gt_boxes[i],
                            batch.gt_labels[i]);
    labels.push_back(a.labels);
    targets.push_back(a.target_boxes);
  }
  auto lab = torch::cat(labels);
  auto tgt_all = torch::cat(targets);
  auto cls = out.class_logits.reshape({-1, C});
  auto edges = out.edge_logits.reshape({-1, 4, hs.points()});
  auto locs = out.locations.repeat({N, 1});
  auto strides = out.strides.repeat({N});

  auto pos = lab.ge(0).nonzero().squeeze(1);
  const int64_t P = pos.numel();
  auto q = torch::zeros_like(cls);
  StepTerms st;
  if (P > 0) {
    auto e_pos = edges.index_select(0, pos);
    auto l_pos = locs.index_select(0, pos);
    auto s_pos = strides.index_select(0, pos);
    auto tgt = tgt_all.index_select(0, pos);
    auto lab_pos = lab.index_select(0, pos);
    auto pred_boxes = decode_boxes(l_pos, s_pos, distribution_expectation(e_pos, hs));
    auto iou = aligned_iou(pred_boxes.detach(), tgt).clamp(0.0, 1.0);
    q.index_put_({pos, lab_pos}, iou);
    st.terms.fdl = fdl(e_pos, encode_boxes(l_pos, s_pos, tgt), hs, &st.clamped);
    st.terms.frl = frl_giou(pred_boxes, tgt, iou);
    if (teacher_edges.defined()) st.terms.hkd = hkd(e_pos, teacher_edges.index_select(0, pos), tau);
  } else if (teacher_edges.defined()) {
    st.terms.hkd = edges.sum() * 0;
  }
  st.terms.fcl = fcl(cls, q, P);
  return st;
}

void set_lr(torch::optim::SGD& opt, double lr) {
  for (auto& g : opt.param_groups()) static_cast<torch::optim::SGDOptions&>(g.options()).lr(lr);
}

TrainResult run_training(const DistillConfig& cfg, const DetectorSpec& spec, int64_t init_seed,
                         const std::vector<AnnotatedImage>& train_set, const DatasetStats& stats, Detector teacher,
                         bool use_hkd, const TrainOptions& opts) {
  if (train_set.empty()) throw ValidationError("training set is empty");
  cfg.validate();
  apply_determinism_from_env();
  const auto& sched = cfg.schedule;
  const auto t0 = std::chrono::steady_clock::now();

  TrainResult res;
  res.model = build_detector(spec, init_seed);
  auto& model = *res.model;
  bool norm_eval = false;
  if (teacher) {
    teacher->eval();
    for (auto& p : teacher->parameters()) p.set_requires_grad(false);
    res.report.teacher_hash_before = parameter_hash(*teacher);
    if (sched.warm_start) {
      torch::NoGradGuard ng;
      auto src = teacher->named_parameters();
      auto bufs = teacher->named_buffers();
      for (auto& p : model.named_parameters()) {
        if (auto* t = src.find(p.key()); t && t->sizes() == p.value().sizes()) p.value().copy_(*t);
      }
      for (auto& b : model.named_buffers()) {
        if (auto* t = bufs.find(b.key()); t && t->sizes() == b.value().sizes()) b.value().copy_(*t);
      }
      norm_eval = true;
    }
  }

  torch::optim::SGD opt(model.parameters(), torch::optim::SGDOptions(sched.lr)
                                                .momentum(sched.momentum)
                                                .weight_decay(sched.weight_decay));
  int64_t start_epoch = 1;
  int64_t iteration = 0;
  if (opts.resume_from) {
    auto ckpt = read_checkpoint(*opts.resume_from);
    load_checkpoint_into(ckpt, model, &opt);
    start_epoch = ckpt.manifest.at("epoch").get<int64_t>() + 1;
    iteration = ckpt.manifest.at("iteration").get<int64_t>();
  }
  if (!opts.out_dir.empty()) fs::create_directories(opts.out_dir);

  PreprocessOptions popts;
  popts.target_height = cfg.data.image_height;
  popts.target_width = cfg.data.image_width;
  popts.flip_prob = cfg.data.flip_prob;

  auto dump_state = [&](const std::string& why) {
    if (opts.out_dir.empty()) return;
    nlohmann::json extra{{"reason", why}, {"iteration", iteration}};
    write_checkpoint(opts.out_dir / "crash_state.ckpt", make_checkpoint(model, extra, &opt));
  };

  const size_t n = train_set.size();
  const auto bs = static_cast<size_t>(sched.batch_size);
  bool stop = false;
  for (int64_t epoch = start_epoch; epoch <= sched.epochs && !stop; ++epoch) {
    const double lr = sched.lr_at_epoch(epoch);
    set_lr(opt, lr);
    res.report.lr_trace.push_back(lr);
    std::seed_seq seq{static_cast<uint64_t>(sched.seed), static_cast<uint64_t>(epoch)};
    std::mt19937_64 rng(seq);
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::shuffle(order.begin(), order.end(), rng);

    model.train();
    if (norm_eval) freeze_batch_norm(model);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    for (size_t begin = 0; begin < n; begin += bs) {
      if (sched.max_iterations > 0 && iteration >= sched.max_iterations) {
        stop = true;
        break;
      }
      auto batch = make_batch(train_set, order, begin, std::min(n, begin + bs), true, stats, popts, rng);
      torch::Tensor teacher_edges;
      if (teacher && use_hkd) {
        torch::NoGradGuard ng;
        teacher_edges = teacher->forward(batch.images).edge_logits.reshape({-1, 4, spec.head.points()});
      }
      auto out = model.forward(batch.images);
      if (teacher_edges.defined() && teacher_edges.size(0) != out.edge_logits.size(0) * out.edge_logits.size(1)) {
        throw ShapeError("teacher and student produce different location sets");
      }
      auto st = build_terms(out, batch, spec.head, teacher_edges, cfg.weights.tau);
      res.report.clamped_targets += st.clamped;
      WeightedLoss wl;
      try {
        wl = total_loss(st.terms, cfg.weights);
      } catch (const NonFiniteLoss& e) {
        dump_state(e.what());
        throw;
      }
      opt.zero_grad();
      wl.total.backward();
      if (sched.grad_clip > 0) torch::nn::utils::clip_grad_norm_(model.parameters(), sched.grad_clip);
      opt.step();

      res.report.iterations.push_back(wl.bundle);
      ++iteration;
      ++rec.iterations;
      rec.mean.fcl += wl.bundle.fcl;
      rec.mean.fdl += wl.bundle.fdl;
      rec.mean.frl += wl.bundle.frl;
      rec.mean.hkd += wl.bundle.hkd;
      rec.mean.total += wl.bundle.total;
    }
    if (rec.iterations == 0) break;
    const double k = static_cast<double>(rec.iterations);
    rec.mean.fcl /= k;
    rec.mean.fdl /= k;
    rec.mean.frl /= k;
    rec.mean.hkd /= k;
    rec.mean.total /= k;
    res.report.epochs.push_back(rec);
    if (teacher && parameter_hash(*teacher) != res.report.teacher_hash_before) {
      throw std::logic_error("teacher parameters changed during student training");
    }
    if (opts.progress) {
      char line[200];
      std::snprintf(line, sizeof(line), "epoch %lld lr %.3g iters %lld loss %.5f (fcl %.4f fdl %.4f frl %.4f hkd %.4f)\n",
                    static_cast<long long>(epoch), lr, static_cast<long long>(rec.iterations), rec.mean.total,
                    rec.mean.fcl, rec.mean.fdl, rec.mean.frl, rec.mean.hkd);
      *opts.progress << line << std::flush;
    }
    if (!opts.out_dir.empty()) {
      nlohmann::json extra{{"epoch", epoch}, {"iteration", iteration}, {"seed", sched.seed}};
      write_checkpoint(opts.out_dir / "state.ckpt", make_checkpoint(model, extra, &opt));
    }
  }
  if (teacher) res.report.teacher_hash_after = parameter_hash(*teacher);
  res.report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  model.eval();
  return res;
}

}  // namespace

TrainResult train_teacher(const DistillConfig& cfg, const std::vector<AnnotatedImage>& train_set,
                          const DatasetStats& stats, const TrainOptions& opts) {
  auto c = cfg;
  c.weights.hkd_weight = 0.0;
  return run_training(c, c.teacher, c.schedule.seed, train_set, stats, Detector{nullptr}, false, opts);
}

TrainResult train_student(const DistillConfig& cfg, const std::vector<AnnotatedImage>& train_set,
                          const DatasetStats& stats, Detector teacher, const TrainOptions& opts) {
  if (!teacher) throw ValidationError("train_student: a teacher model is required");
  const auto& th = teacher->spec().head;
  const auto& sh = cfg.student.head;
  if (th.bins != sh.bins || th.eps_min != sh.eps_min || th.eps_max != sh.eps_max) {
    throw ValidationError("train_student: teacher and student heads use different bins");
  }
  const bool use_hkd = cfg.schedule.distill && cfg.weights.hkd_weight > 0;
  auto c = cfg;
  if (!use_hkd) c.weights.hkd_weight = 0.0;
  // Offset keeps the student's initial draw distinct from the teacher's.
  return run_training(c, c.student, c.schedule.seed + 1000003, train_set, stats, teacher, use_hkd, opts);
}

EvalResult evaluate(DetectorImpl& model, const std::vector<AnnotatedImage>& samples, const DatasetStats& stats,
                    const DataConfig& data, const std::string& name, int64_t batch_size) {
  if (samples.empty()) throw ValidationError("evaluate: no samples");
  model.eval();
  PreprocessOptions popts;
  popts.target_height = data.image_height;
  popts.target_width = data.image_width;
  popts.flip_prob = 0.0;
  PostprocessOptions post;
  post.score_threshold = data.score_threshold;
  post.nms_iou = data.nms_iou;

  std::mt19937_64 unused(0);
  std::vector<size_t> order(samples.size());
  std::iota(order.begin(), order.end(), size_t{0});
  EvalResult res;
  std::vector<std::pair<bool, bool>> decisions;
  const auto bs = static_cast<size_t>(std::max<int64_t>(1, batch_size));
  for (size_t begin = 0; begin < samples.size(); begin += bs) {
    const size_t end = std::min(samples.size(), begin + bs);
    auto batch = make_batch(samples, order, begin, end, false, stats, popts, unused);
    auto dets = model.predict(batch.images, post);
    for (size_t k = begin; k < end; ++k) {
      auto& d = dets[k - begin];
      const auto& s = samples[k];
      const float sx = static_cast<float>(s.pixels.cols) / static_cast<float>(data.image_width);
      const float sy = static_cast<float>(s.pixels.rows) / static_cast<float>(data.image_height);
      for (auto& det : d) {
        det.box[0] *= sx;
        det.box[2] *= sx;
        det.box[1] *= sy;
        det.box[3] *= sy;
      }
      decisions.emplace_back(image_fault_decision(d, data.decision_threshold), s.image_fault_flag);
      res.detections.push_back(std::move(d));
    }
  }
  res.metrics = compute_metrics(decisions, name);
  return res;
}

void write_loss_csv(const fs::path& path, const std::vector<LossBundle>& rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << LossLog::kHeader << '\n';
  for (size_t i = 0; i < rows.size(); ++i) os << LossLog::format_row(static_cast<int64_t>(i), rows[i]) << '\n';
}

void write_epoch_csv(const fs::path& path, const std::vector<EpochRecord>& rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "epoch,lr,iterations,fcl,fdl,frl,hkd,total\n";
  for (const auto& r : rows) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%lld,%.9g,%lld,%.9g,%.9g,%.9g,%.9g,%.9g", static_cast<long long>(r.epoch), r.lr,
                  static_cast<long long>(r.iterations), r.mean.fcl, r.mean.fdl, r.mean.frl, r.mean.hkd, r.mean.total);
    os << buf << '\n';
  }
}

}  // namespace hsd
