#pragma once

// Run configuration files, checkpoints, the line-delimited metrics stream,
// and the rank-heatmap table.
//
// Config files are sectioned key/value text; unknown sections or keys are
// errors, and parse -> serialize -> parse is idempotent. Checkpoints are a
// text manifest followed by a raw little-endian 64-bit payload and are
// written atomically (temp file + rename). Metrics are one JSON object per
// line, append-only.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "lora2/adapters.hpp"
#include "lora2/allocation.hpp"
#include "lora2/matrix.hpp"
#include "lora2/orthogonality.hpp"
#include "lora2/tasks.hpp"
#include "lora2/training.hpp"

namespace lora2 {

struct ModelConfig {
  int layers = 1;
  int dim = 32;
  int ff_dim = 64;
  Nonlinearity nonlinearity = Nonlinearity::Rectifier;
  std::vector<std::string> attach;  // empty: adapt every site

  void validate() const {
    if (layers < 1 || dim < 1 || ff_dim < 1) {
      throw std::invalid_argument("model dimensions must be positive");
    }
  }
};

struct TaskConfig {
  int rho = 2;
  double noise_std = 0.0;
  int n_train = 256;
  int n_eval = 256;
  std::string planted_site;  // empty: first adapted site

  void validate() const {
    if (rho < 0) throw std::invalid_argument("rho must be non-negative");
    if (noise_std < 0.0) throw std::invalid_argument("noise_std must be non-negative");
    if (n_train < 1 || n_eval < 1) throw std::invalid_argument("sample counts must be positive");
  }
};

struct AdapterFileConfig {
  std::string kind = "lora2";  // lora2 | lora | svd
  int k = 4;
  int r_init = 4;
  double init_std = 0.02;

  void validate() const {
    if (kind != "lora2" && kind != "lora" && kind != "svd") {
      throw std::invalid_argument("unknown adapter kind '" + kind + "'");
    }
    if (k < 1 || r_init < 1) throw std::invalid_argument("adapter k and r_init must be >= 1");
    if (!(init_std > 0.0)) throw std::invalid_argument("init_std must be positive");
  }
};

struct OrthConfig {
  OrthMode mode = OrthMode::All;
  double gamma = 0.1;

  void validate() const {
    if (gamma < 0.0) throw std::invalid_argument("gamma must be non-negative");
  }
};

struct AllocatorConfig {
  double beta1 = 0.85;
  double beta2 = 0.85;
  int prune_every = 10;
  long long b_target = 0;
  int t_warmup = 0;
  int t_final = 0;
};

struct RunConfig {
  int steps = 100;
  int batch_size = 32;
  double lr = 1e-3;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  int log_every = 10;
  int eval_every = 0;
};

struct ExperimentConfig {
  ModelConfig model;
  TaskConfig task;
  AdapterFileConfig adapter;
  OrthConfig orth;
  AllocatorConfig allocator;
  RunConfig train;
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline long long parse_int(const std::string& v, const std::string& key) {
  std::size_t pos = 0;
  long long out = 0;
  try {
    out = std::stoll(v, &pos);
  } catch (const std::exception&) {
    throw std::invalid_argument("key '" + key + "': '" + v + "' is not an integer");
  }
  if (pos != v.size()) throw std::invalid_argument("key '" + key + "': '" + v + "' is not an integer");
  return out;
}

inline double parse_real(const std::string& v, const std::string& key) {
  std::size_t pos = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw std::invalid_argument("key '" + key + "': '" + v + "' is not a number");
  }
  if (pos != v.size()) throw std::invalid_argument("key '" + key + "': '" + v + "' is not a number");
  return out;
}

inline std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::vector<std::string> split_csv(const std::string& v) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(v);
  while (std::getline(in, cur, ',')) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

}  // namespace detail

inline ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw std::invalid_argument("config line " + std::to_string(lineno) + ": unterminated section");
      }
      section = detail::trim(line.substr(1, line.size() - 2));
      if (section != "model" && section != "task" && section != "adapter" &&
          section != "orth" && section != "allocator" && section != "train") {
        throw std::invalid_argument("config line " + std::to_string(lineno) +
                                    ": unknown section [" + section + "]");
      }
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (section.empty()) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": key outside any section");
    }
    const std::string qual = section + "." + key;
    if (section == "model") {
      if (key == "layers") cfg.model.layers = static_cast<int>(detail::parse_int(value, qual));
      else if (key == "dim") cfg.model.dim = static_cast<int>(detail::parse_int(value, qual));
      else if (key == "ff_dim") cfg.model.ff_dim = static_cast<int>(detail::parse_int(value, qual));
      else if (key == "nonlinearity") cfg.model.nonlinearity = nonlinearity_from_name(value);
      else if (key == "attach") cfg.model.attach = value == "all" ? std::vector<std::string>{} : detail::split_csv(value);
      else throw std::invalid_argument("config line " + std::to_string(lineno) + ": unknown key '" + qual + "'");
    } else if (section == "task") {
      if (key == "rho") cfg.task.rho = static_cast<int>(detail::parse_int(value, qual));
      else if (key == "noise_std") cfg.task.noise_std = detail::parse_real(value, qual);
      else if (key == "n_train") cfg.task.n_train = static_cast<int>(detail::parse_int(value, qual));
      else if (key == "n_eval") cfg.task.n_eval = static_cast<int>(detail::parse_int(value, qual));
      else if (key == "planted_site") cfg.task.planted_site = value;
      else throw std::invalid_argument("config line " + std::to_string(lineno) + ": unknown key '" + qual + "'");
    } else if (section == "adapter") {
      if (key == "kind") cfg.adapter.kind = value;
      else if (key == "k") cfg.adapter.k = static_cast<int>(detail::parse_int(value, qual));
      else if (key == "r_init") cfg.adapter.r_init = static_cast<int>(detail::parse_int(value, qual));
      else if (key == "init_std") cfg.adapter.init_std = detail::parse_real(value, qual);
      else throw std::invalid_argument("config line " + std::to_string(lineno) + ": unknown key '" + qual + "'");
    } else if (section == "orth") {
      if (key == "mode") cfg.orth.mode = orth_mode_from_name(value);
      else if (key == "gamma") cfg.orth.gamma = detail::parse_real(value, qual);
      else throw std::invalid_argument("config line " + std::to_string(lineno) + ": unknown key '" + qual + "'");
    } else if (section == "allocator") {
      if (key == "beta1") cfg.allocator.beta1 = detail::parse_real(value, qual);
      else if (key == "beta2") cfg.allocator.beta2 = detail::parse_real(value, qual);
      else if (key == "prune_every") cfg.allocator.prune_every = static_cast<int>(detail::parse_int(value, qual));
      else if (key == "b_target") cfg.allocator.b_target = detail::parse_int(value, qual);
      else if (key == "t_warmup") cfg.allocator.t_warmup = static_cast<int>(detail::parse_int(value, qual));
      else if (key == "t_final") cfg.allocator.t_final = static_cast<int>(detail::parse_int(value, qual));
      else throw std::invalid_argument("config line " + std::to_string(lineno) + ": unknown key '" + qual + "'");
    } else {  // train
      if (key == "steps") cfg.train.steps = static_cast<int>(detail::parse_int(value, qual));
      else if (key == "batch_size") cfg.train.batch_size = static_cast<int>(detail::parse_int(value, qual));
      else if (key == "lr") cfg.train.lr = detail::parse_real(value, qual);
      else if (key == "weight_decay") cfg.train.weight_decay = detail::parse_real(value, qual);
      else if (key == "seed") cfg.train.seed = static_cast<std::uint64_t>(detail::parse_int(value, qual));
      else if (key == "log_every") cfg.train.log_every = static_cast<int>(detail::parse_int(value, qual));
      else if (key == "eval_every") cfg.train.eval_every = static_cast<int>(detail::parse_int(value, qual));
      else throw std::invalid_argument("config line " + std::to_string(lineno) + ": unknown key '" + qual + "'");
    }
  }
  cfg.model.validate();
  cfg.task.validate();
  cfg.adapter.validate();
  cfg.orth.validate();
  return cfg;
}

inline std::string serialize_config(const ExperimentConfig& cfg) {
  std::ostringstream out;
  out << "[model]\n";
  out << "layers = " << cfg.model.layers << '\n';
  out << "dim = " << cfg.model.dim << '\n';
  out << "ff_dim = " << cfg.model.ff_dim << '\n';
  out << "nonlinearity = " << nonlinearity_name(cfg.model.nonlinearity) << '\n';
  out << "attach = ";
  if (cfg.model.attach.empty()) {
    out << "all";
  } else {
    for (std::size_t i = 0; i < cfg.model.attach.size(); ++i) {
      if (i) out << ',';
      out << cfg.model.attach[i];
    }
  }
  out << '\n';
  out << "\n[task]\n";
  out << "rho = " << cfg.task.rho << '\n';
  out << "noise_std = " << detail::format_real(cfg.task.noise_std) << '\n';
  out << "n_train = " << cfg.task.n_train << '\n';
  out << "n_eval = " << cfg.task.n_eval << '\n';
  if (!cfg.task.planted_site.empty()) out << "planted_site = " << cfg.task.planted_site << '\n';
  out << "\n[adapter]\n";
  out << "kind = " << cfg.adapter.kind << '\n';
  out << "k = " << cfg.adapter.k << '\n';
  out << "r_init = " << cfg.adapter.r_init << '\n';
  out << "init_std = " << detail::format_real(cfg.adapter.init_std) << '\n';
  out << "\n[orth]\n";
  out << "mode = " << orth_mode_name(cfg.orth.mode) << '\n';
  out << "gamma = " << detail::format_real(cfg.orth.gamma) << '\n';
  out << "\n[allocator]\n";
  out << "beta1 = " << detail::format_real(cfg.allocator.beta1) << '\n';
  out << "beta2 = " << detail::format_real(cfg.allocator.beta2) << '\n';
  out << "prune_every = " << cfg.allocator.prune_every << '\n';
  out << "b_target = " << cfg.allocator.b_target << '\n';
  out << "t_warmup = " << cfg.allocator.t_warmup << '\n';
  out << "t_final = " << cfg.allocator.t_final << '\n';
  out << "\n[train]\n";
  out << "steps = " << cfg.train.steps << '\n';
  out << "batch_size = " << cfg.train.batch_size << '\n';
  out << "lr = " << detail::format_real(cfg.train.lr) << '\n';
  out << "weight_decay = " << detail::format_real(cfg.train.weight_decay) << '\n';
  out << "seed = " << cfg.train.seed << '\n';
  out << "log_every = " << cfg.train.log_every << '\n';
  out << "eval_every = " << cfg.train.eval_every << '\n';
  return out.str();
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open config '" + path + "'");
  std::ostringstream buf;
  buf << f.rdbuf();
  try {
    return parse_config(buf.str());
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(path + ": " + e.what());
  }
}

// FNV-1a over the canonical serialization.
inline std::uint64_t config_hash(const ExperimentConfig& cfg) {
  const std::string s = serialize_config(cfg);
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace detail {

inline void append_doubles(std::string& payload, const Matrix& m) {
  static_assert(sizeof(double) == 8, "64-bit payload expects 8-byte doubles");
  for (double v : m.values()) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    if constexpr (std::endian::native == std::endian::big) {
      bits = __builtin_bswap64(bits);
    }
    char raw[8];
    std::memcpy(raw, &bits, 8);
    payload.append(raw, 8);
  }
}

inline Matrix read_doubles(const std::string& payload, std::size_t& off, int rows, int cols) {
  Matrix m(rows, cols);
  const std::size_t need = m.size() * 8;
  if (off + need > payload.size()) throw std::runtime_error("checkpoint payload too short");
  for (std::size_t e = 0; e < m.size(); ++e) {
    std::uint64_t bits;
    std::memcpy(&bits, payload.data() + off + e * 8, 8);
    if constexpr (std::endian::native == std::endian::big) {
      bits = __builtin_bswap64(bits);
    }
    std::memcpy(&m.data()[e], &bits, 8);
  }
  off += need;
  return m;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const AdapterSet& adapters, int step,
                            std::uint64_t cfg_hash) {
  std::ostringstream manifest;
  manifest << "lora2ckpt 1\n";
  manifest << "config_hash " << hash_hex(cfg_hash) << '\n';
  manifest << "step " << step << '\n';
  manifest << "adapters " << adapters.size() << '\n';
  std::string payload;
  for (const auto& sa : adapters.items()) {
    if (const auto* ad = std::get_if<Lora2Adapter>(&sa.adapter)) {
      manifest << "adapter " << sa.site << " lora2 " << ad->din() << ' ' << ad->dout() << ' '
               << ad->k() << ' ' << ad->r() << '\n';
      manifest << "mask " << sa.site;
      for (std::uint8_t m : ad->mask) manifest << ' ' << (m ? 1 : 0);
      manifest << '\n';
      ad->u_out.ensure_finite("checkpoint");
      ad->u_in.ensure_finite("checkpoint");
      ad->lambda.ensure_finite("checkpoint");
      ad->v_in.ensure_finite("checkpoint");
      ad->v_out.ensure_finite("checkpoint");
      detail::append_doubles(payload, ad->u_out);
      detail::append_doubles(payload, ad->u_in);
      detail::append_doubles(payload, ad->lambda);
      detail::append_doubles(payload, ad->v_in);
      detail::append_doubles(payload, ad->v_out);
    } else if (const auto* lo = std::get_if<LoraAdapter>(&sa.adapter)) {
      manifest << "adapter " << sa.site << " lora " << lo->din() << ' ' << lo->dout() << ' '
               << lo->r() << '\n';
      lo->b.ensure_finite("checkpoint");
      lo->a.ensure_finite("checkpoint");
      detail::append_doubles(payload, lo->b);
      detail::append_doubles(payload, lo->a);
    } else if (const auto* sv = std::get_if<SvdAdapter>(&sa.adapter)) {
      manifest << "adapter " << sa.site << " svd " << sv->din() << ' ' << sv->dout() << ' '
               << sv->r() << '\n';
      manifest << "mask " << sa.site;
      for (std::uint8_t m : sv->mask) manifest << ' ' << (m ? 1 : 0);
      manifest << '\n';
      sv->p.ensure_finite("checkpoint");
      sv->lambda.ensure_finite("checkpoint");
      sv->q.ensure_finite("checkpoint");
      detail::append_doubles(payload, sv->p);
      detail::append_doubles(payload, sv->lambda);
      detail::append_doubles(payload, sv->q);
    }
  }
  manifest << "payload " << payload.size() << '\n';

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open '" + tmp + "' for writing");
    f << manifest.str();
    f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!f.flush()) throw std::runtime_error("write failed for '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

struct LoadedCheckpoint {
  AdapterSet adapters;
  int step = 0;
  std::uint64_t cfg_hash = 0;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  std::string magic;
  int version = 0;
  if (!(f >> magic >> version) || magic != "lora2ckpt") {
    throw std::runtime_error("'" + path + "' is not a checkpoint file");
  }
  if (version != 1) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  std::string key;
  LoadedCheckpoint out;
  std::string hash_str;
  int n_adapters = -1;
  struct Entry {
    std::string site, kind;
    int din = 0, dout = 0, k = 0, r = 0;
    std::vector<std::uint8_t> mask;
  };
  std::vector<Entry> entries;
  std::size_t payload_len = std::string::npos;
  while (f >> key) {
    if (key == "config_hash") {
      f >> hash_str;
      out.cfg_hash = std::stoull(hash_str, nullptr, 16);
    } else if (key == "step") {
      f >> out.step;
    } else if (key == "adapters") {
      f >> n_adapters;
    } else if (key == "adapter") {
      Entry e;
      f >> e.site >> e.kind;
      if (e.kind == "lora2") {
        f >> e.din >> e.dout >> e.k >> e.r;
      } else if (e.kind == "lora" || e.kind == "svd") {
        f >> e.din >> e.dout >> e.r;
      } else {
        throw std::runtime_error("unknown adapter kind '" + e.kind + "' in '" + path + "'");
      }
      entries.push_back(std::move(e));
    } else if (key == "mask") {
      std::string site;
      f >> site;
      if (entries.empty() || entries.back().site != site) {
        throw std::runtime_error("mask line out of order in '" + path + "'");
      }
      Entry& e = entries.back();
      e.mask.resize(static_cast<std::size_t>(e.r));
      for (int i = 0; i < e.r; ++i) {
        int bit = 0;
        if (!(f >> bit) || (bit != 0 && bit != 1)) {
          throw std::runtime_error("bad mask bit in '" + path + "'");
        }
        e.mask[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(bit);
      }
    } else if (key == "payload") {
      std::size_t n = 0;
      f >> n;
      payload_len = n;
      f.get();  // newline before the raw bytes
      break;
    } else {
      throw std::runtime_error("unknown manifest key '" + key + "' in '" + path + "'");
    }
    if (!f) throw std::runtime_error("malformed manifest in '" + path + "'");
  }
  if (payload_len == std::string::npos || n_adapters < 0 ||
      static_cast<std::size_t>(n_adapters) != entries.size()) {
    throw std::runtime_error("incomplete manifest in '" + path + "'");
  }
  std::string payload(payload_len, '\0');
  f.read(payload.data(), static_cast<std::streamsize>(payload_len));
  if (static_cast<std::size_t>(f.gcount()) != payload_len) {
    throw std::runtime_error("checkpoint payload length mismatch in '" + path + "': expected " +
                             std::to_string(payload_len) + " bytes, got " +
                             std::to_string(f.gcount()));
  }

  std::size_t off = 0;
  for (const Entry& e : entries) {
    try {
      if (e.kind == "lora2") {
        Lora2Adapter ad;
        ad.u_out = detail::read_doubles(payload, off, e.din, e.k);
        ad.u_in = detail::read_doubles(payload, off, e.k, e.r);
        ad.lambda = detail::read_doubles(payload, off, e.r, 1);
        ad.v_in = detail::read_doubles(payload, off, e.r, e.k);
        ad.v_out = detail::read_doubles(payload, off, e.k, e.dout);
        ad.mask = e.mask.empty() ? std::vector<std::uint8_t>(static_cast<std::size_t>(e.r), 1)
                                 : e.mask;
        for (int i = 0; i < ad.r(); ++i) {
          if (!ad.mask[i]) ad.lambda(i, 0) = 0.0;
        }
        out.adapters.add(e.site, std::move(ad));
      } else if (e.kind == "lora") {
        LoraAdapter ad;
        ad.b = detail::read_doubles(payload, off, e.din, e.r);
        ad.a = detail::read_doubles(payload, off, e.r, e.dout);
        out.adapters.add(e.site, std::move(ad));
      } else {
        SvdAdapter ad;
        ad.p = detail::read_doubles(payload, off, e.din, e.r);
        ad.lambda = detail::read_doubles(payload, off, e.r, 1);
        ad.q = detail::read_doubles(payload, off, e.r, e.dout);
        ad.mask = e.mask.empty() ? std::vector<std::uint8_t>(static_cast<std::size_t>(e.r), 1)
                                 : e.mask;
        for (int i = 0; i < ad.r(); ++i) {
          if (!ad.mask[i]) ad.lambda(i, 0) = 0.0;
        }
        out.adapters.add(e.site, std::move(ad));
      }
    } catch (const std::domain_error& e2) {
      throw std::runtime_error("non-finite values in checkpoint '" + path + "': " + e2.what());
    }
  }
  if (off != payload.size()) {
    throw std::runtime_error("checkpoint payload length mismatch in '" + path + "': " +
                             std::to_string(payload.size() - off) + " trailing bytes");
  }
  return out;
}

inline nlohmann::ordered_json metrics_to_json(const MetricsRecord& rec) {
  // Absent measurements travel as explicit nulls, never as NaN text.
  const auto real_or_null = [](double v) {
    return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(nullptr);
  };
  nlohmann::ordered_json j;
  j["step"] = rec.step;
  j["event"] = rec.event;
  j["task_loss"] = real_or_null(rec.task_loss);
  j["orth_loss"] = real_or_null(rec.orth_loss);
  j["retained"] = rec.retained;
  j["threshold"] = real_or_null(rec.threshold);
  j["site_ranks"] = rec.site_ranks;
  j["eval"] = real_or_null(rec.eval);
  if (!rec.message.empty()) j["message"] = rec.message;
  return j;
}

inline MetricsRecord metrics_from_json(const nlohmann::ordered_json& j) {
  MetricsRecord rec;
  rec.step = j.at("step").get<int>();
  rec.event = j.at("event").get<std::string>();
  auto real_or_nan = [&j](const char* key) {
    const auto& v = j.at(key);
    return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
  };
  rec.task_loss = real_or_nan("task_loss");
  rec.orth_loss = j.at("orth_loss").is_null() ? 0.0 : j.at("orth_loss").get<double>();
  rec.retained = j.at("retained").get<long long>();
  rec.threshold = real_or_nan("threshold");
  rec.site_ranks = j.at("site_ranks").get<std::map<std::string, int>>();
  rec.eval = real_or_nan("eval");
  if (j.contains("message")) rec.message = j.at("message").get<std::string>();
  return rec;
}

inline void append_metrics(const std::string& path, const MetricsRecord& rec) {
  std::ofstream f(path, std::ios::binary | std::ios::app);
  if (!f) throw std::runtime_error("cannot open metrics file '" + path + "'");
  f << metrics_to_json(rec).dump() << '\n';
  if (!f.flush()) throw std::runtime_error("write failed for '" + path + "'");
}

inline std::vector<MetricsRecord> read_metrics(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open metrics file '" + path + "'");
  std::vector<MetricsRecord> out;
  std::string line;
  while (std::getline(f, line)) {
    if (detail::trim(line).empty()) continue;
    out.push_back(metrics_from_json(nlohmann::ordered_json::parse(line)));
  }
  return out;
}

// Rows are layer indices, columns the five site kinds; cells hold the final
// effective rank of the adapter at that site (0 when absent or fully pruned).
inline void export_heatmap(const std::string& path, const std::map<std::string, int>& site_ranks) {
  int max_layer = -1;
  for (const auto& [site, rank] : site_ranks) {
    if (site.size() < 4 || site[0] != 'L') {
      throw std::invalid_argument("unrecognized site name '" + site + "'");
    }
    const std::size_t dot = site.find('.');
    if (dot == std::string::npos) {
      throw std::invalid_argument("unrecognized site name '" + site + "'");
    }
    max_layer = std::max(max_layer, static_cast<int>(detail::parse_int(site.substr(1, dot - 1), site)));
  }
  if (max_layer < 0) throw std::invalid_argument("export_heatmap: no adapted sites");

  std::ostringstream out;
  out << "layer";
  for (const std::string& kind : site_kinds()) out << ',' << kind;
  out << '\n';
  for (int l = 0; l <= max_layer; ++l) {
    out << l;
    for (const std::string& kind : site_kinds()) {
      auto it = site_ranks.find("L" + std::to_string(l) + "." + kind);
      out << ',' << (it == site_ranks.end() ? 0 : it->second);
    }
    out << '\n';
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  f << out.str();
  if (!f.flush()) throw std::runtime_error("write failed for '" + path + "'");
}

}  // namespace lora2
