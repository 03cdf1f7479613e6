#include <catch2/catch_amalgamated.hpp>

#include <set>
#include <sstream>

#include "support.hpp"

using namespace tinymoe;
using namespace tinymoe::data;

namespace {

// Builds a 4x4 grid from (row, col, color, shape) tuples.
GridImage grid(std::initializer_list<std::array<int, 4>> objects) {
  GridImage g;
  g.cells.assign(16, Cell{});
  for (const auto& o : objects) g.cells[static_cast<std::size_t>(o[0] * 4 + o[1])] = Cell{o[2], o[3]};
  return g;
}

constexpr int kRed = 0, kGreen = 1, kBlue = 2;

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return ErrorCode::NumericError;
}

}  // namespace

TEST_CASE("gen_samples is a pure function of the seed", "[data]") {
  const auto a = gen_samples(0, 1000, uniform_mix());
  const auto b = gen_samples(0, 1000, uniform_mix());
  const auto c = gen_samples(1, 1000, uniform_mix());
  REQUIRE(a == b);
  REQUIRE(a != c);
  // a prefix is stable under a larger n
  const auto d = gen_samples(0, 10, uniform_mix());
  REQUIRE(std::equal(d.begin(), d.end(), a.begin()));
}

TEST_CASE("task mix proportions", "[data]") {
  const auto s = gen_samples(0, 1000, TaskMix{{TaskTag::Caption, 0.5}, {TaskTag::Count, 0.5}});
  int caption = 0, count = 0;
  for (const auto& x : s) (x.tag == TaskTag::Caption ? caption : count)++;
  REQUIRE(caption + count == 1000);
  REQUIRE(std::abs(caption - 500) <= 25);
  REQUIRE(std::abs(count - 500) <= 25);
}

TEST_CASE("invalid mixes", "[data]") {
  REQUIRE(code_of([] { gen_samples(0, 10, TaskMix{{TaskTag::Caption, 0.5}}); }) == ErrorCode::InvalidMix);
  REQUIRE(code_of([] { gen_samples(0, 10, TaskMix{{TaskTag::Caption, 1.5}, {TaskTag::Count, -0.5}}); }) ==
          ErrorCode::InvalidMix);
  REQUIRE(code_of([] { gen_samples(0, 10, TaskMix{}); }) == ErrorCode::InvalidMix);
  REQUIRE(code_of([] { gen_samples(0, 0, uniform_mix()); }) == ErrorCode::InvalidMix);
}

TEST_CASE("constructed truths", "[data]") {
  const auto img = grid({{0, 0, kRed, 0}, {1, 2, kRed, 1}, {3, 3, kRed, 2}, {2, 1, kBlue, 0}});
  SECTION("three red cells count to 3") {
    REQUIRE(verify(img, "how many red", "3").correct);
    REQUIRE_FALSE(verify(img, "how many red", "4").correct);
    REQUIRE(verify(img, "how many green", "0").correct);
  }
  SECTION("wrong count corruption of a 3-red grid") {
    const Sample s{img, "how many red", "3", TaskTag::Count};
    int up = 0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
      Rng rng(seed);
      const auto neg = corrupt(s, Corruption::WrongCount, rng);
      REQUIRE((neg == "4" || neg == "2"));
      up += neg == "4" ? 1 : 0;
    }
    // direction is a fair coin
    REQUIRE(std::abs(up - 500) < 4 * std::sqrt(250.0));
    const Sample zero{img, "how many green", "0", TaskTag::Count};
    Rng rng(0);
    REQUIRE(corrupt(zero, Corruption::WrongCount, rng) == "1");
  }
  SECTION("absent colour in a caption is flagged") {
    REQUIRE(verify(img, "describe", "red blue").correct);
    const auto v = verify(img, "describe", "red green blue");
    REQUIRE(v.hallucinated());
    REQUIRE(v.mentions == 3);
    REQUIRE(v.false_mentions == 1);
    Rng rng(3);
    const Sample s{img, "describe", "red blue", TaskTag::Caption};
    const auto neg = corrupt(s, Corruption::AbsentColor, rng);
    REQUIRE(neg.has_value());
    REQUIRE(verify(img, "describe", *neg).hallucinated());
  }
  SECTION("locate and compare") {
    REQUIRE(verify(img, "where is the blue circle", "row 2 col 1").correct);
    REQUIRE(verify(img, "where is the blue circle", "row 1 col 1").false_mentions == 1);
    REQUIRE(verify(img, "more red or blue", "red").correct);
    REQUIRE(verify(img, "more red or blue", "blue").hallucinated());
  }
  SECTION("generated count answers agree with a cell tally") {
    for (const auto& s : gen_samples(5, 400, TaskMix{{TaskTag::Count, 1.0}})) {
      const auto color = token_id(s.instruction.substr(9));
      int n = 0;
      for (const auto& c : s.image.cells) n += (!c.empty() && color_token(c.color) == color) ? 1 : 0;
      REQUIRE(s.response == std::to_string(n));
    }
  }
}

TEST_CASE("generated samples all pass the independent verifier", "[data]") {
  for (const auto& s : gen_samples(11, 2000, uniform_mix())) {
    const auto v = verify(s.image, s.instruction, s.response);
    INFO(s.instruction << " -> " << s.response);
    REQUIRE(v.correct);
    REQUIRE_FALSE(v.hallucinated());
  }
}

TEST_CASE("preference pairs: chosen passes, rejected fails", "[data]") {
  const auto pairs = gen_preference_pairs(0, 1000, uniform_corruption_mix());
  REQUIRE(pairs == gen_preference_pairs(0, 1000, uniform_corruption_mix()));
  std::set<Corruption> kinds;
  for (const auto& p : pairs) {
    kinds.insert(p.corruption);
    INFO(p.instruction << " | " << p.chosen << " | " << p.rejected);
    REQUIRE(p.chosen != p.rejected);
    REQUIRE(verify(p.image, p.instruction, p.chosen).correct);
    const auto bad = verify(p.image, p.instruction, p.rejected);
    REQUIRE_FALSE(bad.correct);
    REQUIRE(bad.hallucinated());
  }
  REQUIRE(kinds.size() == 4);
}

TEST_CASE("tokenizer round trips", "[data]") {
  REQUIRE(tokenize("").empty());
  REQUIRE(detokenize(std::vector<int>{}).empty());
  for (int id = 0; id < vocab_size(); ++id) {
    const auto& w = vocabulary()[static_cast<std::size_t>(id)];
    REQUIRE(tokenize(w) == std::vector<int>{id});
    REQUIRE(detokenize(std::vector<int>{id}) == w);
  }
  for (const auto& s : gen_samples(2, 1000, uniform_mix())) {
    REQUIRE(detokenize(tokenize(s.response)) == s.response);
    REQUIRE(detokenize(tokenize(s.instruction)) == s.instruction);
  }
  REQUIRE(vocab_size() == ModelConfig{}.vocab_size);
  REQUIRE(code_of([] { tokenize("how many pink"); }) == ErrorCode::UnknownSymbol);
  REQUIRE(code_of([] { tokenize("red  blue"); }) == ErrorCode::UnknownSymbol);
}

TEST_CASE("render encodes content and position", "[data]") {
  const auto img = grid({{1, 2, kGreen, 2}});
  const auto px = render<float>(img);
  REQUIRE(px.rows() == 16);
  REQUIRE(px.cols() == patch_dim(4, 4));
  REQUIRE(px.cols() == ModelConfig{}.patch_dim);
  const int cell = 1 * 4 + 2;
  REQUIRE(px(cell, kGreen) == 1.0f);
  REQUIRE(px(cell, kNumColors + 2) == 1.0f);
  REQUIRE(px(cell, kNumColors + kNumShapes + 1) == 1.0f);
  REQUIRE(px(cell, kNumColors + kNumShapes + 4 + 2) == 1.0f);
  REQUIRE(px.row(cell).sum() == 4.0f);
  REQUIRE(px.row(0).sum() == 2.0f);  // empty cell: only its coordinates
}

TEST_CASE("examples mask only response targets", "[data]") {
  for (const auto& s : gen_samples(4, 300, uniform_mix())) {
    const auto ex = make_example<float>(s);
    const auto n_img = static_cast<std::size_t>(ex.pixels.rows());
    const auto prompt = prompt_tokens(s.instruction).size();
    const auto resp = tokenize(s.response).size() + 1;  // with <eos>
    REQUIRE(ex.tokens.size() == prompt + resp);
    REQUIRE(ex.mask.size() == n_img + ex.tokens.size());
    std::size_t masked = 0;
    for (std::size_t p = 0; p < ex.mask.size(); ++p) {
      if (!ex.mask[p]) continue;
      ++masked;
      // position p predicts text index p + 1 - n_img, which must be in the response
      REQUIRE(p + 1 >= n_img + prompt);
      REQUIRE(ex.targets[p] == ex.tokens[p + 1 - n_img]);
    }
    REQUIRE(masked == resp);
    REQUIRE(ex.targets.back() == -1);
  }
}

TEST_CASE("batching", "[data]") {
  const std::size_t n = 103;
  Batcher b(n, 8, 5);
  REQUIRE(b.batches_per_epoch() == 13);
  const auto e0 = b.epoch(0);
  REQUIRE(e0 == Batcher(n, 8, 5).epoch(0));
  REQUIRE(e0 != b.epoch(1));
  std::vector<std::size_t> all;
  for (const auto& batch : e0) all.insert(all.end(), batch.begin(), batch.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < n; ++i) REQUIRE(all[i] == i);
  REQUIRE_THROWS_AS(Batcher(n, 0, 1), Error);
}

TEST_CASE("padding never reaches a loss", "[data]") {
  const auto samples = gen_samples(9, 8, uniform_mix());
  std::vector<Example<double>> ex;
  for (const auto& s : samples) ex.push_back(make_example<double>(s));
  std::vector<std::size_t> idx(ex.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto batch = padded_batch<double>(ex, idx);
  Model<double> m(ModelConfig{});
  Model<double> t(ModelConfig{.seed = 4});
  Rng rng(1);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& padded = batch[i];
    REQUIRE(padded.tokens.size() == batch[0].tokens.size());
    const auto len = ex[i].targets.size();
    for (std::size_t p = len; p < padded.mask.size(); ++p) REQUIRE(padded.mask[p] == 0);
    if (padded.tokens.size() == ex[i].tokens.size()) continue;
    auto sl = m.logits(padded.pixels, padded.tokens);
    const auto tl = t.logits(padded.pixels, padded.tokens);
    const double ce = init_ce_loss(sl, padded.targets, padded.mask).value;
    const double kl = kd_kl_loss(sl, tl, padded.mask).value;
    // unpadded reference
    REQUIRE(ce == Catch::Approx(init_ce_loss(m.logits(ex[i].pixels, ex[i].tokens), ex[i].targets, ex[i].mask).value)
                       .epsilon(1e-12));
    for (Eigen::Index p = static_cast<Eigen::Index>(len - 1); p < sl.rows(); ++p) {
      for (Eigen::Index v = 0; v < sl.cols(); ++v) sl(p, v) += 100.0 * rng.normal();
    }
    REQUIRE(init_ce_loss(sl, padded.targets, padded.mask).value == ce);
    REQUIRE(kd_kl_loss(sl, tl, padded.mask).value == kl);
  }
}

TEST_CASE("JSON lines round trip", "[data]") {
  const auto samples = gen_samples(3, 50, uniform_mix());
  const auto pairs = gen_preference_pairs(3, 50, uniform_corruption_mix());
  std::stringstream ss;
  write_jsonl(ss, samples);
  REQUIRE(read_samples_jsonl(ss) == samples);
  std::stringstream sp;
  write_jsonl(sp, pairs);
  REQUIRE(read_pairs_jsonl(sp) == pairs);
  std::stringstream bad("{\"image\": 3}\n");
  REQUIRE_THROWS(read_samples_jsonl(bad));
}
