#include "dpa/config.hpp"

#include <charconv>
#include <functional>
#include <map>
#include <sstream>

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "dpa/container.hpp"

namespace dpa {

namespace {

namespace pt = boost::property_tree;

std::string where(const std::string& section, const std::string& key) { return "[" + section + "] " + key; }

template <typename T>
T parse_number(const std::string& raw, const std::string& ctx) {
  const std::string s = boost::algorithm::trim_copy(raw);
  T v{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size()) {
    throw ConfigError(ctx + ": cannot parse '" + raw + "' as a number");
  }
  return v;
}

bool parse_bool(const std::string& raw, const std::string& ctx) {
  const std::string s = boost::algorithm::to_lower_copy(boost::algorithm::trim_copy(raw));
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError(ctx + ": expected a boolean, got '" + raw + "'");
}

template <typename T>
std::vector<T> parse_list(const std::string& raw, const std::string& ctx) {
  std::vector<std::string> parts;
  boost::algorithm::split(parts, raw, boost::algorithm::is_any_of(","));
  std::vector<T> out;
  for (const auto& p : parts) {
    if (boost::algorithm::trim_copy(p).empty()) continue;
    out.push_back(parse_number<T>(p, ctx));
  }
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::map<std::string, std::map<std::string, Setter>>& schema() {
  static const std::map<std::string, std::map<std::string, Setter>> table = {
      {"experiment",
       {{"seed", [](RunConfig& c, const std::string& v, const std::string& k) { c.seed = parse_number<std::uint64_t>(v, k); }}}},
      {"data",
       {{"classes", [](RunConfig& c, const std::string& v, const std::string& k) { c.data.classes = parse_number<std::size_t>(v, k); }},
        {"per_class", [](RunConfig& c, const std::string& v, const std::string& k) { c.data.per_class = parse_number<std::size_t>(v, k); }},
        {"input_dim", [](RunConfig& c, const std::string& v, const std::string& k) { c.backbone.input_dim = parse_number<std::size_t>(v, k); }},
        {"sigma", [](RunConfig& c, const std::string& v, const std::string& k) { c.data.sigma = parse_number<double>(v, k); }},
        {"train_fraction", [](RunConfig& c, const std::string& v, const std::string& k) { c.data.train_fraction = parse_number<double>(v, k); }}}},
      {"model",
       {{"hidden", [](RunConfig& c, const std::string& v, const std::string& k) { c.backbone.hidden_widths = parse_list<std::size_t>(v, k); }},
        {"embedding_dim", [](RunConfig& c, const std::string& v, const std::string& k) { c.backbone.embedding_dim = parse_number<std::size_t>(v, k); }},
        {"hook_layers", [](RunConfig& c, const std::string& v, const std::string& k) { c.backbone.hook_layers = parse_list<int>(v, k); }},
        {"scale", [](RunConfig& c, const std::string& v, const std::string& k) { c.margin.scale = parse_number<double>(v, k); }},
        {"margin", [](RunConfig& c, const std::string& v, const std::string& k) { c.margin.margin = parse_number<double>(v, k); }}}},
      {"train",
       {{"epochs", [](RunConfig& c, const std::string& v, const std::string& k) { c.train.epochs = parse_number<int>(v, k); }},
        {"lr", [](RunConfig& c, const std::string& v, const std::string& k) { c.train.learning_rate = parse_number<double>(v, k); }},
        {"batch_size", [](RunConfig& c, const std::string& v, const std::string& k) { c.train.batch_size = parse_number<std::size_t>(v, k); }},
        {"shuffle", [](RunConfig& c, const std::string& v, const std::string& k) { c.train.shuffle = parse_bool(v, k); }},
        {"pretrained", [](RunConfig& c, const std::string& v, const std::string&) { c.pretrain.path = boost::algorithm::trim_copy(v); }},
        {"pretrain_identities", [](RunConfig& c, const std::string& v, const std::string& k) { c.pretrain.identities = parse_number<std::size_t>(v, k); }},
        {"pretrain_per_class", [](RunConfig& c, const std::string& v, const std::string& k) { c.pretrain.per_class = parse_number<std::size_t>(v, k); }},
        {"pretrain_epochs", [](RunConfig& c, const std::string& v, const std::string& k) { c.pretrain.epochs = parse_number<int>(v, k); }}}},
      {"victim",
       {{"per_class", [](RunConfig& c, const std::string& v, const std::string& k) { c.victim.per_class = parse_number<std::size_t>(v, k); }},
        {"epochs", [](RunConfig& c, const std::string& v, const std::string& k) { c.victim.epochs = parse_number<int>(v, k); }}}},
      {"attack",
       {{"epsilon", [](RunConfig& c, const std::string& v, const std::string& k) { c.attack.epsilon = parse_number<double>(v, k); }},
        {"step", [](RunConfig& c, const std::string& v, const std::string& k) { c.attack.step = parse_number<double>(v, k); }},
        {"eta", [](RunConfig& c, const std::string& v, const std::string& k) { c.attack.eta = parse_number<double>(v, k); }},
        {"iterations", [](RunConfig& c, const std::string& v, const std::string& k) { c.attack.iterations = parse_number<int>(v, k); }},
        {"hooks", [](RunConfig& c, const std::string& v, const std::string& k) { c.attack.hooks = parse_list<int>(v, k); }},
        {"norm",
         [](RunConfig& c, const std::string& v, const std::string& k) {
           try {
             c.attack.norm = parse_loss_norm(boost::algorithm::trim_copy(v));
           } catch (const std::exception& e) {
             throw ConfigError(k + ": " + e.what());
           }
         }},
        {"transform",
         [](RunConfig& c, const std::string& v, const std::string& k) {
           try {
             c.attack.transform = parse_transform(boost::algorithm::trim_copy(v));
           } catch (const std::exception& e) {
             throw ConfigError(k + ": " + e.what());
           }
         }},
        {"seed", [](RunConfig& c, const std::string& v, const std::string& k) { c.attack.seed = parse_number<std::uint64_t>(v, k); }}}},
      {"eval",
       {{"far", [](RunConfig& c, const std::string& v, const std::string& k) { c.eval.far = parse_number<double>(v, k); }},
        {"pairs", [](RunConfig& c, const std::string& v, const std::string& k) { c.eval.pairs = parse_number<std::size_t>(v, k); }},
        {"seeds", [](RunConfig& c, const std::string& v, const std::string& k) { c.eval.seeds = parse_list<std::uint64_t>(v, k); }},
        {"c_grid", [](RunConfig& c, const std::string& v, const std::string& k) { c.eval.c_grid = parse_list<int>(v, k); }},
        {"eta_grid", [](RunConfig& c, const std::string& v, const std::string& k) { c.eval.eta_grid = parse_list<double>(v, k); }}}},
  };
  return table;
}

}  // namespace

void RunConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  try {
    backbone.validate();
    margin.validate();
    train.validate();
    attack.validate(backbone);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  require(data.classes >= 2, "[data] classes must be >= 2");
  require(data.per_class >= 2, "[data] per_class must be >= 2");
  require(data.sigma >= 0.0, "[data] sigma must be >= 0");
  require(data.train_fraction > 0.0 && data.train_fraction < 1.0, "[data] train_fraction must lie in (0, 1)");
  require(pretrain.identities >= 2 && pretrain.per_class >= 1, "[train] pretrain set too small");
  require(pretrain.epochs >= 1, "[train] pretrain_epochs must be >= 1");
  require(victim.per_class >= 2, "[victim] per_class must be >= 2");
  require(victim.epochs >= 1, "[victim] epochs must be >= 1");
  require(eval.far >= 0.0 && eval.far < 1.0, "[eval] far must lie in [0, 1)");
  require(eval.pairs >= 1, "[eval] pairs must be >= 1");
  require(!eval.seeds.empty(), "[eval] seeds must not be empty");
  require(!eval.c_grid.empty(), "[eval] c_grid must not be empty");
  for (int c : eval.c_grid) require(c >= 1, "[eval] c_grid entries must be >= 1");
  require(!eval.eta_grid.empty(), "[eval] eta_grid must not be empty");
  for (double e : eval.eta_grid) require(e >= 0.0, "[eval] eta_grid entries must be >= 0");
}

nlohmann::json RunConfig::to_json() const {
  return {{"experiment", {{"seed", seed}}},
          {"data",
           {{"classes", data.classes},
            {"per_class", data.per_class},
            {"input_dim", backbone.input_dim},
            {"sigma", data.sigma},
            {"train_fraction", data.train_fraction}}},
          {"model",
           {{"hidden", backbone.hidden_widths},
            {"embedding_dim", backbone.embedding_dim},
            {"hook_layers", backbone.hook_layers},
            {"scale", margin.scale},
            {"margin", margin.margin}}},
          {"train",
           {{"epochs", train.epochs},
            {"lr", train.learning_rate},
            {"batch_size", train.batch_size},
            {"shuffle", train.shuffle},
            {"pretrained", pretrain.path.string()},
            {"pretrain_identities", pretrain.identities},
            {"pretrain_per_class", pretrain.per_class},
            {"pretrain_epochs", pretrain.epochs}}},
          {"victim", {{"per_class", victim.per_class}, {"epochs", victim.epochs}}},
          {"attack", attack.to_json()},
          {"eval",
           {{"far", eval.far},
            {"pairs", eval.pairs},
            {"seeds", eval.seeds},
            {"c_grid", eval.c_grid},
            {"eta_grid", eval.eta_grid}}}};
}

RunConfig parse_config(const std::string& text) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  RunConfig config;
  for (const auto& [section, body] : tree) {
    const auto sec = schema().find(section);
    if (sec == schema().end()) {
      if (body.empty()) throw ConfigError("config: key '" + section + "' outside any section");
      throw ConfigError("config: unknown section [" + section + "]");
    }
    for (const auto& [key, node] : body) {
      const auto setter = sec->second.find(key);
      if (setter == sec->second.end()) throw ConfigError("config: unknown key " + where(section, key));
      setter->second(config, node.data(), where(section, key));
    }
  }
  config.validate();
  return config;
}

RunConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config: file not found: " + path.string());
  return parse_config(read_file(path));
}

}  // namespace dpa
