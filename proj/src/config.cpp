#include "m2occ/config.hpp"

#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "m2occ/errors.hpp"

namespace m2occ {

using nlohmann::json;

namespace {

template <typename Fn>
void each_key(const json& obj, const std::string& where, Fn&& fn) {
  if (!obj.is_object()) throw ParameterError("config: '" + where + "' must be a table");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (!fn(it.key(), it.value())) throw ParameterError("config: unknown key '" + where + "." + it.key() + "'");
  }
}

std::size_t as_size(const json& v, const std::string& key) {
  if (v.is_number_unsigned()) return v.get<std::size_t>();
  if (v.is_number_integer() && v.get<long long>() >= 0) return static_cast<std::size_t>(v.get<long long>());
  throw ParameterError("config: '" + key + "' must be a non-negative integer");
}

double as_double(const json& v, const std::string& key) {
  if (!v.is_number()) throw ParameterError("config: '" + key + "' must be a number");
  return v.get<double>();
}

bool as_bool(const json& v, const std::string& key) {
  if (!v.is_boolean()) throw ParameterError("config: '" + key + "' must be a boolean");
  return v.get<bool>();
}

CountRange as_range(const json& v, const std::string& key) {
  if (!v.is_array() || v.size() != 2) throw ParameterError("config: '" + key + "' must be [min, max]");
  return {as_size(v[0], key), as_size(v[1], key)};
}

json range_json(const CountRange& r) { return json::array({r.min, r.max}); }

}  // namespace

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

PipelineConfig PipelineConfig::desk() { return PipelineConfig{}; }

PipelineConfig PipelineConfig::paper() {
  PipelineConfig c;
  c.preset = "paper";
  c.scene.grid = GridSpec::paper();
  c.scene.ring = CameraRing::standard(64);
  c.scene.image_height = 16;
  c.scene.depth_bins = 8;
  c.scene.buildings = {6, 12};
  c.scene.vehicles = {8, 20};
  c.scene.poles = {8, 24};
  c.dims = ModelDims{64, 128, 64, 128, 64};
  c.decoder = DecoderPreset::paper();
  c.optim.lr = 2e-4;
  c.optim.weight_decay = 0.01;
  c.optim.epochs = 24;
  return c;
}

PipelineConfig PipelineConfig::named(const std::string& preset) {
  if (preset == "desk") return desk();
  if (preset == "paper") return paper();
  throw ParameterError("unknown preset '" + preset + "' (expected desk|paper)");
}

void PipelineConfig::validate() const {
  scene.validate();
  if (dims.feature_channels == 0 || dims.encoder_hidden == 0 || dims.voxel_dim == 0 ||
      dims.refiner_hidden == 0 || dims.head_hidden == 0) {
    throw ParameterError("config: model dimensions must be positive");
  }
  if (decoder.blocks == 0 || decoder.heads == 0 || decoder.mlp_ratio == 0 ||
      dims.feature_channels % decoder.heads != 0) {
    throw ParameterError("config: decoder heads must divide feature_channels");
  }
  if (!(beta_mmr >= 0.0)) throw ParameterError("config: mmr.beta must be non-negative");
  if (protos_per_class == 0) throw ParameterError("config: fmm.protos_per_class must be positive");
  if (!(memory_momentum > 0.0 && memory_momentum <= 1.0)) throw ParameterError("config: fmm.momentum must lie in (0, 1]");
  if (!(memory_temperature > 0.0)) throw ParameterError("config: fmm.temperature must be positive");
  rvm.validate(scene.ring);
  if (!(optim.lr > 0.0) || optim.batch_size == 0 || !(optim.beta1 >= 0.0 && optim.beta1 < 1.0) ||
      !(optim.beta2 >= 0.0 && optim.beta2 < 1.0) || !(optim.eps > 0.0) || !(optim.weight_decay >= 0.0)) {
    throw ParameterError("config: invalid optimizer settings");
  }
  if (!(class_weight_cap >= 1.0)) throw ParameterError("config: loss.class_weight_cap must be >= 1");
}

json PipelineConfig::to_json() const {
  json j;
  j["preset"] = preset;
  j["seed"] = seed;
  j["scene"] = {
      {"grid", {{"nx", scene.grid.nx}, {"ny", scene.grid.ny}, {"nz", scene.grid.nz},
                {"half_extent_m", scene.grid.half_extent_m}}},
      {"views", scene.ring.size()},
      {"feature_width", scene.ring.feature_width},
      {"overlap_cols", scene.ring.overlap_cols},
      {"image_height", scene.image_height},
      {"depth_bins", scene.depth_bins},
      {"ground", scene.ground},
      {"buildings", range_json(scene.buildings)},
      {"vehicles", range_json(scene.vehicles)},
      {"poles", range_json(scene.poles)},
      {"max_retries", scene.max_retries},
      {"min_free", scene.min_free},
      {"max_free", scene.max_free},
  };
  j["model"] = {
      {"feature_channels", dims.feature_channels},
      {"encoder_hidden", dims.encoder_hidden},
      {"voxel_dim", dims.voxel_dim},
      {"refiner_hidden", dims.refiner_hidden},
      {"head_hidden", dims.head_hidden},
      {"decoder", {{"blocks", decoder.blocks}, {"heads", decoder.heads}, {"mlp_ratio", decoder.mlp_ratio}}},
  };
  j["mmr"] = {{"enabled", mmr}, {"beta", beta_mmr}};
  j["fmm"] = {{"mode", fmm_mode_name(fmm)},
              {"protos_per_class", protos_per_class},
              {"momentum", memory_momentum},
              {"temperature", memory_temperature}};
  j["rvm"] = {{"p_mask", rvm.p_mask}, {"max_masked", rvm.max_masked}};
  j["optim"] = {{"lr", optim.lr},
                {"beta1", optim.beta1},
                {"beta2", optim.beta2},
                {"eps", optim.eps},
                {"weight_decay", optim.weight_decay},
                {"epochs", optim.epochs},
                {"batch_size", optim.batch_size}};
  j["loss"] = {{"class_weight_cap", class_weight_cap}};
  return j;
}

PipelineConfig PipelineConfig::from_json(const json& j) {
  if (!j.is_object()) throw ParameterError("config: top level must be a table");
  PipelineConfig c = named(j.contains("preset") ? j.at("preset").get<std::string>() : "desk");
  std::size_t views = c.scene.ring.size();
  std::size_t width = c.scene.ring.feature_width;
  std::size_t overlap = c.scene.ring.overlap_cols;
  bool overlap_given = false;

  each_key(j, "", [&](const std::string& k, const json& v) {
    if (k == "preset") return true;
    if (k == "seed") {
      c.seed = v.get<std::uint64_t>();
      return true;
    }
    if (k == "scene") {
      each_key(v, "scene", [&](const std::string& sk, const json& sv) {
        const std::string key = "scene." + sk;
        if (sk == "grid") {
          each_key(sv, key, [&](const std::string& gk, const json& gv) {
            if (gk == "nx") c.scene.grid.nx = as_size(gv, gk);
            else if (gk == "ny") c.scene.grid.ny = as_size(gv, gk);
            else if (gk == "nz") c.scene.grid.nz = as_size(gv, gk);
            else if (gk == "half_extent_m") c.scene.grid.half_extent_m = as_double(gv, gk);
            else return false;
            return true;
          });
        } else if (sk == "views") views = as_size(sv, key);
        else if (sk == "feature_width") width = as_size(sv, key);
        else if (sk == "overlap_cols") {
          overlap = as_size(sv, key);
          overlap_given = true;
        } else if (sk == "image_height") c.scene.image_height = as_size(sv, key);
        else if (sk == "depth_bins") c.scene.depth_bins = as_size(sv, key);
        else if (sk == "ground") c.scene.ground = as_bool(sv, key);
        else if (sk == "buildings") c.scene.buildings = as_range(sv, key);
        else if (sk == "vehicles") c.scene.vehicles = as_range(sv, key);
        else if (sk == "poles") c.scene.poles = as_range(sv, key);
        else if (sk == "max_retries") c.scene.max_retries = as_size(sv, key);
        else if (sk == "min_free") c.scene.min_free = as_double(sv, key);
        else if (sk == "max_free") c.scene.max_free = as_double(sv, key);
        else return false;
        return true;
      });
      return true;
    }
    if (k == "model") {
      each_key(v, "model", [&](const std::string& mk, const json& mv) {
        const std::string key = "model." + mk;
        if (mk == "feature_channels") c.dims.feature_channels = as_size(mv, key);
        else if (mk == "encoder_hidden") c.dims.encoder_hidden = as_size(mv, key);
        else if (mk == "voxel_dim") c.dims.voxel_dim = as_size(mv, key);
        else if (mk == "refiner_hidden") c.dims.refiner_hidden = as_size(mv, key);
        else if (mk == "head_hidden") c.dims.head_hidden = as_size(mv, key);
        else if (mk == "decoder") {
          if (mv.is_string()) {
            c.decoder = DecoderPreset::named(mv.get<std::string>());
          } else {
            each_key(mv, key, [&](const std::string& dk, const json& dv) {
              if (dk == "blocks") c.decoder.blocks = as_size(dv, dk);
              else if (dk == "heads") c.decoder.heads = as_size(dv, dk);
              else if (dk == "mlp_ratio") c.decoder.mlp_ratio = as_size(dv, dk);
              else return false;
              return true;
            });
          }
        } else return false;
        return true;
      });
      return true;
    }
    if (k == "mmr") {
      each_key(v, "mmr", [&](const std::string& mk, const json& mv) {
        if (mk == "enabled") c.mmr = as_bool(mv, "mmr.enabled");
        else if (mk == "beta") c.beta_mmr = as_double(mv, "mmr.beta");
        else return false;
        return true;
      });
      return true;
    }
    if (k == "fmm") {
      each_key(v, "fmm", [&](const std::string& fk, const json& fv) {
        if (fk == "mode") c.fmm = parse_fmm_mode(fv.get<std::string>());
        else if (fk == "protos_per_class") c.protos_per_class = as_size(fv, fk);
        else if (fk == "momentum") c.memory_momentum = as_double(fv, fk);
        else if (fk == "temperature") c.memory_temperature = as_double(fv, fk);
        else return false;
        return true;
      });
      return true;
    }
    if (k == "rvm") {
      each_key(v, "rvm", [&](const std::string& rk, const json& rv) {
        if (rk == "p_mask") c.rvm.p_mask = as_double(rv, rk);
        else if (rk == "max_masked") c.rvm.max_masked = as_size(rv, rk);
        else return false;
        return true;
      });
      return true;
    }
    if (k == "optim") {
      each_key(v, "optim", [&](const std::string& ok, const json& ov) {
        if (ok == "lr") c.optim.lr = as_double(ov, ok);
        else if (ok == "beta1") c.optim.beta1 = as_double(ov, ok);
        else if (ok == "beta2") c.optim.beta2 = as_double(ov, ok);
        else if (ok == "eps") c.optim.eps = as_double(ov, ok);
        else if (ok == "weight_decay") c.optim.weight_decay = as_double(ov, ok);
        else if (ok == "epochs") c.optim.epochs = as_size(ov, ok);
        else if (ok == "batch_size") c.optim.batch_size = as_size(ov, ok);
        else return false;
        return true;
      });
      return true;
    }
    if (k == "loss") {
      each_key(v, "loss", [&](const std::string& lk, const json& lv) {
        if (lk == "class_weight_cap") c.class_weight_cap = as_double(lv, lk);
        else return false;
        return true;
      });
      return true;
    }
    return false;
  });

  if (!overlap_given && width != c.scene.ring.feature_width) overlap = width / 4;
  c.scene.ring = CameraRing::with_views(views, width, overlap);
  c.validate();
  return c;
}

std::string PipelineConfig::hash() const {
  json j = to_json();
  j.erase("seed");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

std::string PipelineConfig::method_label() const {
  std::string label = mmr ? "+MMR" : "";
  if (fmm == FmmMode::single) label += "+SP";
  if (fmm == FmmMode::multi) label += "+MP";
  return label.empty() ? "baseline" : label;
}

// ---- TOML subset ----

namespace {

class TomlParser {
 public:
  explicit TomlParser(const std::string& text) : text_(text) {}

  json parse() {
    json root = json::object();
    json* table = &root;
    while (!at_end()) {
      skip_ws_and_comments();
      if (at_end()) break;
      if (peek() == '[') {
        ++pos_;
        skip_inline_ws();
        std::vector<std::string> path = dotted_key();
        skip_inline_ws();
        expect(']');
        table = &root;
        for (const auto& part : path) {
          json& next = (*table)[part];
          if (next.is_null()) next = json::object();
          if (!next.is_object()) fail("table '" + part + "' redefines a value");
          table = &next;
        }
      } else {
        std::vector<std::string> path = dotted_key();
        skip_inline_ws();
        expect('=');
        skip_inline_ws();
        json value = parse_value();
        json* target = table;
        for (std::size_t i = 0; i + 1 < path.size(); ++i) {
          json& next = (*target)[path[i]];
          if (next.is_null()) next = json::object();
          target = &next;
        }
        if (target->contains(path.back())) fail("duplicate key '" + path.back() + "'");
        (*target)[path.back()] = std::move(value);
      }
      skip_inline_ws();
      if (!at_end() && peek() == '#') skip_comment();
      if (!at_end()) expect('\n');
    }
    return root;
  }

 private:
  bool at_end() const { return pos_ >= text_.size(); }
  char peek() const { return text_[pos_]; }

  [[noreturn]] void fail(const std::string& what) const {
    std::size_t line = 1;
    for (std::size_t i = 0; i < pos_ && i < text_.size(); ++i) line += text_[i] == '\n';
    throw FormatError("config line " + std::to_string(line) + ": " + what);
  }

  void expect(char c) {
    if (at_end() || peek() != c) fail(std::string("expected '") + (c == '\n' ? "newline" : std::string(1, c)) + "'");
    ++pos_;
  }

  void skip_inline_ws() {
    while (!at_end() && (peek() == ' ' || peek() == '\t' || peek() == '\r')) ++pos_;
  }

  void skip_comment() {
    while (!at_end() && peek() != '\n') ++pos_;
  }

  void skip_ws_and_comments() {
    while (!at_end()) {
      const char c = peek();
      if (c == ' ' || c == '\t' || c == '\r' || c == '\n') ++pos_;
      else if (c == '#') skip_comment();
      else break;
    }
  }

  std::string bare_key() {
    const std::size_t start = pos_;
    while (!at_end() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '_' || peek() == '-')) ++pos_;
    if (pos_ == start) fail("expected a key");
    return text_.substr(start, pos_ - start);
  }

  std::vector<std::string> dotted_key() {
    std::vector<std::string> parts{bare_key()};
    while (!at_end() && peek() == '.') {
      ++pos_;
      parts.push_back(bare_key());
    }
    return parts;
  }

  json parse_value() {
    if (at_end()) fail("missing value");
    const char c = peek();
    if (c == '"') return parse_string();
    if (c == '[') {
      ++pos_;
      json arr = json::array();
      skip_ws_and_comments();
      while (!at_end() && peek() != ']') {
        arr.push_back(parse_value());
        skip_ws_and_comments();
        if (!at_end() && peek() == ',') {
          ++pos_;
          skip_ws_and_comments();
        }
      }
      expect(']');
      return arr;
    }
    const std::size_t start = pos_;
    while (!at_end() && peek() != ',' && peek() != ']' && peek() != '\n' && peek() != '#' && peek() != ' ' &&
           peek() != '\t' && peek() != '\r')
      ++pos_;
    std::string tok = text_.substr(start, pos_ - start);
    if (tok == "true") return true;
    if (tok == "false") return false;
    std::string clean;
    for (char ch : tok)
      if (ch != '_') clean += ch;
    if (clean.empty()) fail("missing value");
    const bool is_float = clean.find_first_of(".eE") != std::string::npos || clean == "inf" || clean == "nan";
    try {
      std::size_t used = 0;
      if (is_float) {
        const double d = std::stod(clean, &used);
        if (used == clean.size()) return d;
      } else if (clean[0] == '-') {
        const long long v = std::stoll(clean, &used);
        if (used == clean.size()) return v;
      } else {
        const unsigned long long v = std::stoull(clean, &used);
        if (used == clean.size()) return v;
      }
    } catch (const std::exception&) {
    }
    fail("cannot parse value '" + tok + "'");
  }

  json parse_string() {
    expect('"');
    std::string out;
    while (!at_end() && peek() != '"') {
      char c = text_[pos_++];
      if (c == '\n') fail("unterminated string");
      if (c == '\\') {
        if (at_end()) fail("unterminated escape");
        const char e = text_[pos_++];
        switch (e) {
          case 'n': c = '\n'; break;
          case 't': c = '\t'; break;
          case '"': c = '"'; break;
          case '\\': c = '\\'; break;
          default: fail(std::string("unsupported escape \\") + e);
        }
      }
      out += c;
    }
    expect('"');
    return out;
  }

  const std::string& text_;
  std::size_t pos_ = 0;
};

}  // namespace

json parse_toml(const std::string& text) { return TomlParser(text).parse(); }

json load_toml_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_toml(ss.str());
}

}  // namespace m2occ
