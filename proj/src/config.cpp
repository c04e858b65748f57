#include "tsal/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "tsal/common.hpp"

namespace tsal {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad(const std::string& key, const std::string& value, const char* what) {
  throw ConfigError("bad value '" + value + "' for " + key + ": expected " + what);
}

long long parse_int(const std::string& key, const std::string& v) {
  long long x = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), x);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) bad(key, v, "an integer");
  return x;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t x = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), x);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) bad(key, v, "a nonnegative integer");
  return x;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) bad(key, v, "a number");
    return x;
  } catch (const std::logic_error&) {
    bad(key, v, "a number");
  }
}

bool parse_switch(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  bad(key, v, "on or off");
}

template <std::size_t N>
std::array<int, N> parse_list(const std::string& key, const std::string& v) {
  std::array<int, N> out{};
  std::stringstream ss(v);
  std::string item;
  std::size_t k = 0;
  while (std::getline(ss, item, ',')) {
    if (k == N) bad(key, v, "a comma-separated list of the right length");
    out[k++] = static_cast<int>(parse_int(key, trim(item)));
  }
  if (k != N) bad(key, v, "a comma-separated list of the right length");
  return out;
}

template <std::size_t N>
std::string list_str(const std::array<int, N>& a) {
  std::string s;
  for (std::size_t i = 0; i < N; ++i) s += (i ? "," : "") + std::to_string(a[i]);
  return s;
}

std::string num(double x) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::vector<std::pair<std::string, Field>>& fields() {
  using R = RunConfig;
  using S = const std::string&;
  auto I = [](auto member) {
    return Field{[member](R& c, S k, S v) { member(c) = static_cast<std::remove_reference_t<decltype(member(c))>>(parse_int(k, v)); },
                 [member](const R& c) { return std::to_string(member(const_cast<R&>(c))); }};
  };
  auto D = [](auto member) {
    return Field{[member](R& c, S k, S v) { member(c) = parse_double(k, v); },
                 [member](const R& c) { return num(member(const_cast<R&>(c))); }};
  };
  auto B = [](auto member) {
    return Field{[member](R& c, S k, S v) { member(c) = parse_switch(k, v); },
                 [member](const R& c) { return std::string(member(const_cast<R&>(c)) ? "on" : "off"); }};
  };
  auto U = [](auto member) {
    return Field{[member](R& c, S k, S v) { member(c) = parse_u64(k, v); },
                 [member](const R& c) { return std::to_string(member(const_cast<R&>(c))); }};
  };
  static const std::vector<std::pair<std::string, Field>> table = {
      {"seed", U([](R& c) -> std::uint64_t& { return c.seed; })},
      {"model.frames", I([](R& c) -> int& { return c.model.frames; })},
      {"model.views", I([](R& c) -> int& { return c.model.views; })},
      {"model.heads", I([](R& c) -> int& { return c.model.heads; })},
      {"model.fov_deg", Field{[](R& c, S k, S v) { c.model.fov = deg2rad(parse_double(k, v)); },
                              [](const R& c) { return num(rad2deg(c.model.fov)); }}},
      {"model.patch_out", I([](R& c) -> int& { return c.model.patch_out; })},
      {"model.head", Field{[](R& c, S k, S v) {
                             if (v == "sigmoid") c.model.head = OutputHead::kSigmoid;
                             else if (v == "relu") c.model.head = OutputHead::kRelu;
                             else bad(k, v, "sigmoid or relu");
                           },
                           [](const R& c) { return std::string(c.model.head == OutputHead::kSigmoid ? "sigmoid" : "relu"); }}},
      {"model.attention", Field{[](R& c, S k, S v) {
                                  if (v == "vstca") c.model.attention = AttentionMode::kVstca;
                                  else if (v == "vsta") c.model.attention = AttentionMode::kVsta;
                                  else bad(k, v, "vstca or vsta");
                                },
                                [](const R& c) { return std::string(c.model.attention == AttentionMode::kVstca ? "vstca" : "vsta"); }}},
      {"model.sim_est", B([](R& c) -> bool& { return c.model.sim_est; })},
      {"model.skips", B([](R& c) -> bool& { return c.model.skips; })},
      {"model.mlp_ratio", I([](R& c) -> int& { return c.model.mlp_ratio; })},
      {"model.decoder_channels", Field{[](R& c, S k, S v) { c.model.decoder_channels = parse_list<4>(k, v); },
                                       [](const R& c) { return list_str(c.model.decoder_channels); }}},
      {"model.clamp_relevance", B([](R& c) -> bool& { return c.model.clamp_relevance; })},
      {"model.loss", Field{[](R& c, S k, S v) {
                             if (v == "kld") c.model.loss = LossKind::kKld;
                             else if (v == "kld+cc") c.model.loss = LossKind::kKldCc;
                             else bad(k, v, "kld or kld+cc");
                           },
                           [](const R& c) { return std::string(c.model.loss == LossKind::kKld ? "kld" : "kld+cc"); }}},
      {"model.blend_height", I([](R& c) -> int& { return c.model.blend_height; })},
      {"model.blend_width", I([](R& c) -> int& { return c.model.blend_width; })},
      {"model.output_height", I([](R& c) -> int& { return c.model.output_height; })},
      {"model.output_width", I([](R& c) -> int& { return c.model.output_width; })},
      {"encoder.global_dim", I([](R& c) -> int& { return c.encoder.global_dim; })},
      {"encoder.scale_channels", Field{[](R& c, S k, S v) { c.encoder.scale_channels = parse_list<3>(k, v); },
                                       [](const R& c) { return list_str(c.encoder.scale_channels); }}},
      {"encoder.text_length", I([](R& c) -> int& { return c.encoder.text_length; })},
      {"encoder.patch", I([](R& c) -> int& { return c.encoder.patch; })},
      {"encoder.seed", U([](R& c) -> std::uint64_t& { return c.encoder.seed; })},
      {"pipeline.sigma_deg", D([](R& c) -> double& { return c.pipeline.sigma_deg; })},
      {"pipeline.threshold", D([](R& c) -> double& { return c.pipeline.threshold; })},
      {"pipeline.max_points", Field{[](R& c, S k, S v) { c.pipeline.max_points = parse_u64(k, v); },
                                    [](const R& c) { return std::to_string(c.pipeline.max_points); }}},
      {"pipeline.min_cluster_size", I([](R& c) -> int& { return c.pipeline.min_cluster_size; })},
      {"pipeline.min_samples", I([](R& c) -> int& { return c.pipeline.min_samples; })},
      {"pipeline.single_cluster", B([](R& c) -> bool& { return c.pipeline.single_cluster; })},
      {"pipeline.tau_deg", D([](R& c) -> double& { return c.pipeline.tau_deg; })},
      {"pipeline.gap_fill", I([](R& c) -> int& { return c.pipeline.gap_fill; })},
      {"pipeline.frames", I([](R& c) -> int& { return c.pipeline.frames; })},
      {"train.epochs", I([](R& c) -> int& { return c.train.epochs; })},
      {"train.batch", I([](R& c) -> int& { return c.train.batch; })},
      {"train.max_steps", I([](R& c) -> int& { return c.train.max_steps; })},
      {"train.shuffle", B([](R& c) -> bool& { return c.train.shuffle; })},
      {"train.lr", D([](R& c) -> double& { return c.train.optimizer.lr; })},
      {"train.beta1", D([](R& c) -> double& { return c.train.optimizer.beta1; })},
      {"train.beta2", D([](R& c) -> double& { return c.train.optimizer.beta2; })},
      {"train.eps", D([](R& c) -> double& { return c.train.optimizer.eps; })},
      {"train.weight_decay", D([](R& c) -> double& { return c.train.optimizer.weight_decay; })},
  };
  return table;
}

const Field& field(const std::string& key) {
  for (const auto& [k, f] : fields())
    if (k == key) return f;
  throw ConfigError("unknown configuration key '" + key + "'");
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  field(trim(key)).set(*this, trim(key), trim(value));
  if (trim(key) == "seed") train.seed = seed;
}

void RunConfig::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
  set(assignment.substr(0, eq), assignment.substr(eq + 1));
}

std::string RunConfig::get(const std::string& key) const { return field(key).get(*this); }

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& [k, f] : fields()) out.push_back(k);
  return out;
}

void RunConfig::apply_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    if (trim(line).empty()) continue;
    try {
      set(line);
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

std::string RunConfig::to_text() const {
  std::string s;
  for (const auto& [k, f] : fields()) s += k + "=" + f.get(*this) + "\n";
  return s;
}

void RunConfig::write(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path.string());
  os << to_text();
}

}  // namespace tsal
