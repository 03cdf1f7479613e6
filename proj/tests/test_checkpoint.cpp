#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>

#include "support.hpp"

using namespace tinymoe;

namespace {

ErrorCode load_error(const std::string& bytes) {
  try {
    deserialize_checkpoint(bytes);
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::InvalidConfig;
}

void require_identical(const Model<float>& a, const Model<float>& b) {
  REQUIRE(a.config() == b.config());
  REQUIRE(a.params().size() == b.params().size());
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    const auto& p = a.params()[i];
    const auto& q = b.params()[i];
    REQUIRE(p.name == q.name);
    REQUIRE(p.group == q.group);
    REQUIRE(std::memcmp(p.value.data(), q.value.data(), p.numel() * sizeof(float)) == 0);
  }
}

}  // namespace

TEST_CASE("checkpoints round-trip bit for bit", "[checkpoint]") {
  const Model<float> dense(ModelConfig{.n_layers = 2, .seed = 8});
  auto sparse = upcycle(dense, 4, 2);
  for (auto& p : sparse.params()) {
    if (p.name.find("router") != std::string::npos) p.value.setRandom();
  }
  for (const auto* m : {&dense, static_cast<const Model<float>*>(&sparse)}) {
    const auto back = deserialize_checkpoint(serialize_checkpoint(*m, 42));
    require_identical(*m, back.model);
    REQUIRE(back.step == 42);
    REQUIRE(back.model.is_sparse() == m->is_sparse());
    REQUIRE(model_hash(back.model) == model_hash(*m));
  }
  const auto path = std::filesystem::temp_directory_path() / "tinymoe_ckpt_test" / "m.ckpt";
  save_checkpoint(path, sparse, 3);
  const auto loaded = load_checkpoint(path);
  require_identical(sparse, loaded.model);
  // identical forward output after reload
  const auto ex = data::make_example<float>(data::gen_samples(1, 1, data::uniform_mix())[0]);
  REQUIRE(loaded.model.logits(ex.pixels, ex.tokens) == sparse.logits(ex.pixels, ex.tokens));
  std::filesystem::remove_all(path.parent_path());
}

TEST_CASE("damaged checkpoints are rejected", "[checkpoint]") {
  const Model<float> m(ModelConfig{});
  const auto good = serialize_checkpoint(m);
  REQUIRE(load_error("") == ErrorCode::CheckpointError);
  REQUIRE(load_error(good.substr(0, 4)) == ErrorCode::CheckpointError);
  REQUIRE(load_error(good.substr(0, good.size() - 1)) == ErrorCode::CheckpointError);
  REQUIRE(load_error(good + "x") == ErrorCode::CheckpointError);
  auto garbled = good;
  garbled[9] = '!';
  REQUIRE(load_error(garbled) == ErrorCode::CheckpointError);
  REQUIRE_THROWS_AS(load_checkpoint("/nonexistent/x.ckpt"), Error);
}

TEST_CASE("model hash tracks every parameter", "[checkpoint]") {
  Model<float> m(ModelConfig{});
  const auto h = model_hash(m);
  REQUIRE(model_hash(Model<float>(ModelConfig{})) == h);
  REQUIRE(model_hash(Model<float>(ModelConfig{.seed = 1})) != h);
  auto& last = *std::prev(m.params().end());
  last.value.data()[last.numel() - 1] = std::nextafter(last.value.data()[last.numel() - 1], 1e9f);
  REQUIRE(model_hash(m) != h);
}
