#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "mmfm/config.hpp"
#include "mmfm/error.hpp"

using namespace mmfm;
using nlohmann::json;

namespace {

const char* kMinimal = R"({
  "seed": 3,
  "system": {"n_tx": 16, "n_users": 2, "noise_power": 1.0},
  "channel": [
    {"env_id": "a", "mean_azimuth": -0.5, "seed": 1, "n_samples": 40},
    {"env_id": "b", "mean_azimuth": 0.5, "seed": 2, "n_samples": 40, "los": true},
    {"env_id": "d", "mean_azimuth": 0.1, "seed": 3, "n_samples": 20, "role": "deploy",
     "array": "ula"}
  ],
  "model": {"embed_dim": 16, "ffn_dim": 32, "n_heads": 2, "n_layers": 1},
  "train": {"pretrain_epochs": 2, "train_epochs": 1, "batch_size": 8}
})";

}  // namespace

TEST_CASE("minimal config parses and fills defaults") {
  const RunConfig c = parse_config(kMinimal);
  CHECK(c.seed == 3);
  CHECK(c.system.n_tx == 16);
  REQUIRE(c.channel.size() == 3);
  CHECK(c.channel[1].spec.los);
  CHECK(c.channel[2].deploy);
  CHECK(c.channel[2].spec.array == ArrayLayout::kUla);
  CHECK(c.training_entries().size() == 2);
  REQUIRE(c.deploy_entries().size() == 1);
  CHECK(c.deploy_entries()[0]->spec.env_id == "d");
  CHECK(c.auto_csi_scale);
  CHECK(c.eval.n_eval == 200);
  CHECK(c.paths.data_dir == "data");

  const ModelHyper h = c.model_hyper();
  CHECK(h.n_tx == 16);
  CHECK(h.n_users == 2);
  CHECK(h.embed_dim == 16);
}

TEST_CASE("unknown keys and bad types are configuration errors") {
  json doc = json::parse(kMinimal);
  doc["train"]["learning_rat"] = 0.1;
  CHECK_THROWS_AS(RunConfig::from_json(doc), ConfigError);

  doc = json::parse(kMinimal);
  doc["extra"] = 1;
  CHECK_THROWS_AS(RunConfig::from_json(doc), ConfigError);

  doc = json::parse(kMinimal);
  doc["channel"][0]["colour"] = "red";
  CHECK_THROWS_AS(RunConfig::from_json(doc), ConfigError);

  doc = json::parse(kMinimal);
  doc["system"]["n_tx"] = "sixteen";
  CHECK_THROWS_AS(RunConfig::from_json(doc), ConfigError);

  doc = json::parse(kMinimal);
  doc["channel"][0]["role"] = "test";
  CHECK_THROWS_AS(RunConfig::from_json(doc), ConfigError);

  doc = json::parse(kMinimal);
  doc["model"]["csi_scale"] = "big";
  CHECK_THROWS_AS(RunConfig::from_json(doc), ConfigError);

  CHECK_THROWS_AS(parse_config("{not json"), ConfigError);
}

TEST_CASE("semantic validation") {
  json doc = json::parse(kMinimal);
  doc["channel"][1]["env_id"] = "a";
  CHECK_THROWS_AS(RunConfig::from_json(doc), ConfigError);

  doc = json::parse(kMinimal);
  doc["channel"] = json::array({doc["channel"][2]});
  CHECK_THROWS_AS(RunConfig::from_json(doc), ConfigError);  // no training site

  doc = json::parse(kMinimal);
  doc["model"]["n_heads"] = 3;  // 16 not divisible by 3
  CHECK_THROWS_AS(RunConfig::from_json(doc), ConfigError);

  doc = json::parse(kMinimal);
  doc["adapt"] = {{"few_shot_samples", 1}};
  CHECK_THROWS_AS(RunConfig::from_json(doc), ConfigError);

  doc = json::parse(kMinimal);
  doc["adapt"] = {{"head_pretrain_epochs", -1}};
  CHECK_THROWS_AS(RunConfig::from_json(doc), ConfigError);

  doc = json::parse(kMinimal);
  doc["adapt"] = {{"modes", {"zero_shot", "some_shot"}}};
  CHECK_THROWS_AS(RunConfig::from_json(doc), ConfigError);
}

TEST_CASE("overrides and seed replacement") {
  const RunConfig c = parse_config(
      kMinimal, {"train.learning_rate=0.01", "channel.1.mean_azimuth=1.25",
                 "model.csi_scale=2.5", "adapt.modes=[\"full\"]", "eval.cross_site=false"},
      std::uint64_t{77});
  CHECK(c.seed == 77);
  CHECK(c.train.learning_rate == 0.01);
  CHECK(c.channel[1].spec.mean_azimuth == 1.25);
  CHECK_FALSE(c.auto_csi_scale);
  CHECK(c.model.csi_scale == 2.5);
  REQUIRE(c.adapt.modes.size() == 1);
  CHECK(c.adapt.modes[0] == DeployMode::kFull);
  CHECK_FALSE(c.eval.cross_site);

  // Bare strings are accepted without quotes.
  const RunConfig s = parse_config(kMinimal, {"paths.report_dir=out/r"});
  CHECK(s.paths.report_dir == "out/r");

  CHECK_THROWS_AS(parse_config(kMinimal, {"novalue"}), ConfigError);
  CHECK_THROWS_AS(parse_config(kMinimal, {"channel.9.seed=1"}), ConfigError);
  CHECK_THROWS_AS(parse_config(kMinimal, {"channel.x.seed=1"}), ConfigError);
  CHECK_THROWS_AS(parse_config(kMinimal, {"train..mu=1"}), ConfigError);
  CHECK_THROWS_AS(parse_config(kMinimal, {"seed.x=1"}), ConfigError);
}

TEST_CASE("head schedule inherits unless overridden") {
  RunConfig c = parse_config(kMinimal);
  TrainConfig t = c.head_train_config();
  CHECK(t.learning_rate == c.train.learning_rate);
  CHECK(t.pretrain_epochs == 2);
  CHECK(t.train_epochs == 1);

  c = parse_config(kMinimal, {"adapt.head_learning_rate=0.003", "adapt.head_pretrain_epochs=9"});
  t = c.head_train_config();
  CHECK(t.learning_rate == 0.003);
  CHECK(t.pretrain_epochs == 9);
  CHECK(t.train_epochs == 1);
  CHECK(c.train.learning_rate != 0.003);
}

TEST_CASE("round trip and hash") {
  const RunConfig a = parse_config(kMinimal);
  const RunConfig b = RunConfig::from_json(json::parse(a.to_json().dump()));
  CHECK(a.to_json() == b.to_json());
  CHECK(a.hash() == b.hash());
  CHECK(a.hash().size() == 16);

  // Key order in the source document does not matter.
  json reordered = json::object();
  const json src = json::parse(kMinimal);
  for (auto it = src.rbegin(); it != src.rend(); ++it) reordered[it.key()] = it.value();
  CHECK(RunConfig::from_json(reordered).hash() == a.hash());

  // Paths are not part of the identity; everything else is.
  CHECK(parse_config(kMinimal, {"paths.data_dir=elsewhere"}).hash() == a.hash());
  CHECK(parse_config(kMinimal, {"train.mu=0.5"}).hash() != a.hash());
  CHECK(parse_config(kMinimal, {}, std::uint64_t{4}).hash() != a.hash());

  const RunConfig h = parse_config(kMinimal, {"adapt.head_train_epochs=4"});
  const RunConfig h2 = RunConfig::from_json(json::parse(h.to_json().dump()));
  REQUIRE(h2.adapt.head_train_epochs.has_value());
  CHECK(*h2.adapt.head_train_epochs == 4);
  CHECK_FALSE(h2.adapt.head_learning_rate.has_value());
  CHECK(h2.hash() == h.hash());
}

TEST_CASE("data seeds differ per site and follow the run seed") {
  const RunConfig a = parse_config(kMinimal);
  const RunConfig b = parse_config(kMinimal, {}, std::uint64_t{4});
  CHECK(a.data_seed(a.channel[0]) != a.data_seed(a.channel[1]));
  CHECK(a.data_seed(a.channel[0]) != b.data_seed(b.channel[0]));
  CHECK(a.data_seed(a.channel[0]) == derive_seed(3, 1));
}

TEST_CASE("load_config reads files") {
  const auto dir = std::filesystem::temp_directory_path() / "mmfm_test_config";
  std::filesystem::create_directories(dir);
  const auto path = dir / "c.json";
  {
    std::ofstream out(path);
    out << kMinimal;
  }
  CHECK(load_config(path).hash() == parse_config(kMinimal).hash());
  CHECK_THROWS_AS(load_config(dir / "missing.json"), ConfigError);
  std::filesystem::remove_all(dir);
}
