#include <doctest.h>

#include "rtflow/text.hpp"

using namespace rtflow;

TEST_CASE("tokenizer: lowercasing, punctuation, decimal-aware splitting") {
  CHECK(tokenize_words("Dose 40.05 Gy in 15 fractions.") ==
        std::vector<std::string>{"dose", "40.05", "gy", "in", "15", "fractions"});
  CHECK(tokenize_words("stage T2 N1 disease") ==
        std::vector<std::string>{"stage", "t2", "n1", "disease"});
  // '.' is a separator unless flanked by digits on both sides.
  CHECK(tokenize_words("end. Start") == std::vector<std::string>{"end", "start"});
  CHECK(tokenize_words("3.x y.5 1.2.3") ==
        std::vector<std::string>{"3", "x", "y", "5", "1.2.3"});
  CHECK(tokenize_words("  ,;: ") == std::vector<std::string>{});
  CHECK(tokenize_words("") == std::vector<std::string>{});
}

TEST_CASE("vocab: ids, specials, encode/decode, unknown fallback") {
  Vocab v = Vocab::build({"alpha", "beta", "gamma", "beta"});
  CHECK(v.size() == 9);  // 6 specials + 3 unique words
  CHECK(v.id("alpha") == 6);
  CHECK(v.id("beta") == 7);
  CHECK(v.token(8) == "gamma");
  CHECK(v.id("delta") == v.unk_id());
  CHECK(v.contains("gamma"));
  CHECK_FALSE(v.contains("delta"));

  std::vector<int> ids = v.encode("Beta ALPHA, beta!");
  CHECK(ids == std::vector<int>{7, 6, 7});
  CHECK(v.decode(ids) == "beta alpha beta");

  // Specials are skipped when decoding.
  std::vector<int> with_specials{v.bos_id(), 6, v.tgt_id(), 8, v.eos_id()};
  CHECK(v.decode(with_specials) == "alpha gamma");

  // Round-trip through the serialized token list.
  Vocab v2 = Vocab::from_token_list(v.tokens());
  CHECK(v2.id("gamma") == v.id("gamma"));
  CHECK_THROWS_AS(Vocab::from_token_list({"a", "b"}), ValidationError);
}
