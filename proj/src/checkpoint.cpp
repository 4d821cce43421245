#include "dpig/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "dpig/util.hpp"

namespace dpig {

namespace {

// all multi-byte fields little-endian; this code assumes a little-endian host
static_assert(std::endian::native == std::endian::little,
              "checkpoint format requires a little-endian host");

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <class T>
T take(std::istream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw std::runtime_error("truncated checkpoint file: " + path);
  return v;
}

std::string take_string(std::istream& in, size_t n, const std::string& path) {
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw std::runtime_error("truncated checkpoint file: " + path);
  return s;
}

uint8_t dtype_code(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return 0;
    case torch::kFloat64: return 1;
    case torch::kInt64: return 2;
    default: throw std::invalid_argument("unsupported tensor dtype in checkpoint");
  }
}

torch::ScalarType dtype_from_code(uint8_t code, const std::string& path) {
  switch (code) {
    case 0: return torch::kFloat32;
    case 1: return torch::kFloat64;
    case 2: return torch::kInt64;
    default: throw std::runtime_error("corrupt checkpoint (bad dtype): " + path);
  }
}

std::string meta_to_text(const std::map<std::string, std::string>& meta) {
  std::string out;
  for (const auto& [k, v] : meta) {
    out += k;
    out += " = ";
    out += v;
    out += "\n";
  }
  return out;
}

std::map<std::string, std::string> meta_from_text(const std::string& text) {
  std::map<std::string, std::string> meta;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos) continue;
    meta[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return meta;
}

}  // namespace

const torch::Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : arrays)
    if (n == name) return &t;
  return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (ckpt.magic.size() != 5)
    throw std::invalid_argument("checkpoint magic must be 5 characters");
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());

  out.write(ckpt.magic.data(), 5);
  out.put('\0');
  put<uint32_t>(out, ckpt.version);
  put<uint64_t>(out, ckpt.iteration);
  put<uint32_t>(out, static_cast<uint32_t>(ckpt.config_text.size()));
  out.write(ckpt.config_text.data(), static_cast<std::streamsize>(ckpt.config_text.size()));
  std::string meta = meta_to_text(ckpt.meta);
  put<uint32_t>(out, static_cast<uint32_t>(meta.size()));
  out.write(meta.data(), static_cast<std::streamsize>(meta.size()));

  put<uint32_t>(out, static_cast<uint32_t>(ckpt.arrays.size()));
  for (const auto& [name, tensor] : ckpt.arrays) {
    auto t = tensor.detach().contiguous().cpu();
    put<uint16_t>(out, static_cast<uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<uint8_t>(out, dtype_code(t.scalar_type()));
    put<uint8_t>(out, static_cast<uint8_t>(t.dim()));
    for (int64_t d = 0; d < t.dim(); ++d) put<uint64_t>(out, static_cast<uint64_t>(t.size(d)));
    out.write(reinterpret_cast<const char*>(t.data_ptr()),
              static_cast<std::streamsize>(t.numel() * t.element_size()));
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const std::string& expected_magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
  std::string p = path.string();

  std::string magic = take_string(in, 6, p);
  if (magic.compare(0, 4, "DPIG") != 0 || magic[5] != '\0')
    throw std::runtime_error("not a DPIG checkpoint: " + p);
  magic.resize(5);
  if (magic != expected_magic)
    throw std::runtime_error("checkpoint kind mismatch: expected " + expected_magic +
                             ", found " + magic + " in " + p);

  Checkpoint ckpt;
  ckpt.magic = magic;
  ckpt.version = take<uint32_t>(in, p);
  if (ckpt.version != 1)
    throw std::runtime_error("unsupported checkpoint version " +
                             std::to_string(ckpt.version) + ": " + p);
  ckpt.iteration = take<uint64_t>(in, p);
  ckpt.config_text = take_string(in, take<uint32_t>(in, p), p);
  ckpt.meta = meta_from_text(take_string(in, take<uint32_t>(in, p), p));

  uint32_t n = take<uint32_t>(in, p);
  ckpt.arrays.reserve(n);
  for (uint32_t i = 0; i < n; ++i) {
    uint16_t name_len = take<uint16_t>(in, p);
    std::string name = take_string(in, name_len, p);
    auto dtype = dtype_from_code(take<uint8_t>(in, p), p);
    uint8_t ndim = take<uint8_t>(in, p);
    std::vector<int64_t> dims(ndim);
    int64_t numel = 1;
    for (auto& d : dims) {
      d = static_cast<int64_t>(take<uint64_t>(in, p));
      if (d < 0 || d > (1ll << 40)) throw std::runtime_error("corrupt checkpoint (bad dim): " + p);
      numel *= d;
    }
    auto t = torch::empty(dims, torch::TensorOptions().dtype(dtype));
    in.read(reinterpret_cast<char*>(t.data_ptr()),
            static_cast<std::streamsize>(numel * t.element_size()));
    if (!in) throw std::runtime_error("truncated checkpoint file: " + p);
    ckpt.arrays.emplace_back(std::move(name), std::move(t));
  }
  return ckpt;
}

void append_adam_state(NamedTensors& arrays, const torch::optim::Adam& opt,
                       const NamedTensors& params) {
  const auto& state = opt.state();
  for (const auto& [name, param] : params) {
    auto it = state.find(param.unsafeGetTensorImpl());
    if (it == state.end()) continue;
    auto* s = static_cast<torch::optim::AdamParamState*>(it->second.get());
    arrays.emplace_back("opt/" + name + "/exp_avg", s->exp_avg().clone());
    arrays.emplace_back("opt/" + name + "/exp_avg_sq", s->exp_avg_sq().clone());
    arrays.emplace_back("opt/" + name + "/step",
                        torch::tensor(static_cast<int64_t>(s->step()), torch::kInt64));
  }
}

void restore_adam_state(torch::optim::Adam& opt, const Checkpoint& ckpt,
                        const NamedTensors& params) {
  for (const auto& [name, param] : params) {
    const auto* avg = ckpt.find("opt/" + name + "/exp_avg");
    const auto* avg_sq = ckpt.find("opt/" + name + "/exp_avg_sq");
    const auto* step = ckpt.find("opt/" + name + "/step");
    if (!avg || !avg_sq || !step) continue;
    auto s = std::make_unique<torch::optim::AdamParamState>();
    s->exp_avg(avg->clone());
    s->exp_avg_sq(avg_sq->clone());
    s->step(step->item<int64_t>());
    s->max_exp_avg_sq(torch::Tensor());
    opt.state()[param.unsafeGetTensorImpl()] = std::move(s);
  }
}

void save_embedding_cache(const std::filesystem::path& path, int kind,
                          const torch::Tensor& rows) {
  if (!rows.defined() || rows.dim() != 2)
    throw std::invalid_argument("embedding cache expects a [count,dim] tensor");
  if (kind < 0 || kind > 2) throw std::invalid_argument("bad embedding kind");
  auto t = rows.detach().to(torch::kFloat32).contiguous();
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open embedding cache for writing: " + path.string());
  out.write("DPIGE", 5);
  out.put('\0');
  put<uint8_t>(out, static_cast<uint8_t>(kind));
  put<uint32_t>(out, static_cast<uint32_t>(t.size(1)));
  put<uint64_t>(out, static_cast<uint64_t>(t.size(0)));
  out.write(reinterpret_cast<const char*>(t.data_ptr<float>()),
            static_cast<std::streamsize>(t.numel() * sizeof(float)));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::pair<int, torch::Tensor> load_embedding_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open embedding cache: " + path.string());
  std::string p = path.string();
  std::string magic = take_string(in, 6, p);
  if (magic.compare(0, 5, "DPIGE") != 0 || magic[5] != '\0')
    throw std::runtime_error("not a DPIG embedding cache: " + p);
  int kind = take<uint8_t>(in, p);
  if (kind > 2) throw std::runtime_error("corrupt embedding cache (bad kind): " + p);
  uint32_t dim = take<uint32_t>(in, p);
  uint64_t count = take<uint64_t>(in, p);
  if (dim == 0 || dim > (1u << 24) || count > (1ull << 32))
    throw std::runtime_error("corrupt embedding cache (bad header): " + p);
  auto rows = torch::empty({static_cast<int64_t>(count), static_cast<int64_t>(dim)},
                           torch::kFloat32);
  in.read(reinterpret_cast<char*>(rows.data_ptr<float>()),
          static_cast<std::streamsize>(rows.numel() * sizeof(float)));
  if (!in) throw std::runtime_error("truncated embedding cache: " + p);
  return {kind, rows};
}

}  // namespace dpig
