#include "hsd/checkpoint.hpp"

#include "hsd/errors.hpp"

#include <cstring>
#include <fstream>

namespace hsd {

namespace {

constexpr char kMagic[8] = {'H', 'S', 'D', 'C', 'K', 'P', 'T', '1'};

void write_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

// SGD momentum buffers keyed by parameter name.
std::vector<std::pair<std::string, torch::Tensor*>> momentum_slots(DetectorImpl& model, torch::optim::SGD& opt) {
  std::vector<std::pair<std::string, torch::Tensor*>> slots;
  auto& state = opt.state();
  for (auto& p : model.named_parameters()) {
    auto it = state.find(p.value().unsafeGetTensorImpl());
    if (it == state.end()) continue;
    auto& s = static_cast<torch::optim::SGDParamState&>(*it->second);
    slots.emplace_back(p.key(), &const_cast<torch::Tensor&>(s.momentum_buffer()));
  }
  return slots;
}

}  // namespace

const torch::Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json manifest = ckpt.manifest;
  nlohmann::json index = nlohmann::json::array();
  int64_t offset = 0;
  std::vector<torch::Tensor> payload;
  for (const auto& [name, t] : ckpt.tensors) {
    auto f = t.detach().to(torch::kFloat32).contiguous();
    index.push_back({{"name", name}, {"shape", f.sizes().vec()}, {"offset", offset}});
    offset += f.numel();
    payload.push_back(f);
  }
  manifest["tensors"] = index;
  const std::string text = manifest.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot write checkpoint " + path.string());
  os.write(kMagic, sizeof(kMagic));
  write_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& f : payload) {
    // The host is little-endian (x86-64/aarch64); float bytes go out as-is.
    os.write(static_cast<const char*>(f.data_ptr()), static_cast<std::streamsize>(f.numel() * sizeof(float)));
  }
  if (!os) throw CheckpointError("short write on checkpoint " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0) throw CheckpointError("not a checkpoint file: " + path.string());
  const uint64_t len = read_u64(is);
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw CheckpointError("truncated manifest in " + path.string());

  Checkpoint ckpt;
  try {
    ckpt.manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("bad manifest in " + path.string() + ": " + e.what());
  }
  for (const auto& entry : ckpt.manifest.at("tensors")) {
    auto shape = entry.at("shape").get<std::vector<int64_t>>();
    auto t = torch::empty(shape, torch::kFloat32);
    is.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!is) throw CheckpointError("truncated tensor '" + entry.at("name").get<std::string>() + "' in " + path.string());
    ckpt.tensors.emplace_back(entry.at("name").get<std::string>(), t);
  }
  return ckpt;
}

Checkpoint make_checkpoint(DetectorImpl& model, const nlohmann::json& extra, torch::optim::SGD* optimizer) {
  Checkpoint ckpt;
  ckpt.manifest = extra.is_object() ? extra : nlohmann::json::object();
  ckpt.manifest["fingerprint"] = architecture_fingerprint(model);
  ckpt.manifest["spec"] = model.spec();
  for (const auto& p : model.named_parameters()) ckpt.tensors.emplace_back("model." + p.key(), p.value());
  for (const auto& b : model.named_buffers()) ckpt.tensors.emplace_back("model." + b.key(), b.value());
  if (optimizer) {
    for (auto& [name, buf] : momentum_slots(model, *optimizer)) {
      if (buf->defined()) ckpt.tensors.emplace_back("optim." + name + ".momentum", *buf);
    }
  }
  return ckpt;
}

void load_checkpoint_into(const Checkpoint& ckpt, DetectorImpl& model, torch::optim::SGD* optimizer) {
  const auto expected = architecture_fingerprint(model);
  const auto stored = ckpt.manifest.value("fingerprint", std::string{});
  if (stored != expected) {
    throw CheckpointError("architecture fingerprint mismatch: checkpoint " + stored + ", model " + expected);
  }
  torch::NoGradGuard no_grad;
  auto copy_in = [&](const std::string& key, torch::Tensor& dst) {
    const auto* src = ckpt.find("model." + key);
    if (!src) throw CheckpointError("checkpoint lacks tensor model." + key);
    dst.copy_(src->to(dst.dtype()).view(dst.sizes()));
  };
  for (auto& p : model.named_parameters()) copy_in(p.key(), p.value());
  for (auto& b : model.named_buffers()) copy_in(b.key(), b.value());

  if (optimizer) {
    auto& state = optimizer->state();
    for (auto& p : model.named_parameters()) {
      const auto* m = ckpt.find("optim." + p.key() + ".momentum");
      if (!m) continue;
      auto st = std::make_unique<torch::optim::SGDParamState>();
      st->momentum_buffer(m->clone().view(p.value().sizes()));
      state[p.value().unsafeGetTensorImpl()] = std::move(st);
    }
  }
}

Detector load_detector(const Checkpoint& ckpt) {
  Detector model(ckpt.manifest.at("spec").get<DetectorSpec>());
  load_checkpoint_into(ckpt, *model);
  return model;
}

Detector load_detector(const std::filesystem::path& path) { return load_detector(read_checkpoint(path)); }

}  // namespace hsd
