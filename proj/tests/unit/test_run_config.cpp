#include <doctest.h>

#include "nextscale/error.hpp"
#include "nextscale/run_config.hpp"

using namespace nextscale;

TEST_CASE("run config round trips through its JSON echo") {
  const RunConfig d;
  CHECK_NOTHROW(d.validate());
  const std::string text = run_config_json(d);
  const RunConfig back = parse_run_config(text);
  CHECK(run_config_json(back) == text);
  CHECK(parse_run_config("{}").tokenizer.schedule == ScaleSchedule{1, 2, 3, 4});
  CHECK(d.corpus.per_label * static_cast<std::size_t>(d.corpus.num_labels) == 2000);
  CHECK(d.tokenizer_optim.total_steps == d.tokenizer_train.steps);
  CHECK(d.prior_optim.total_steps == d.prior_train.steps);

  RunConfig m = merge_run_config(d, R"({"prior_train": {"steps": 7}, "sampling": {"cfg_scale": 4, "top_k": 14}})");
  CHECK(m.prior_train.steps == 7);
  CHECK(m.prior_train.batch == d.prior_train.batch);
  CHECK(m.sampling.cfg_scale == 4.0);
  CHECK(parse_run_config(run_config_json(m)).sampling.top_k == 14);
}

TEST_CASE("run config rejects unknown keys and inconsistent sections") {
  CHECK_THROWS_AS(parse_run_config(R"({"bogus": 1})"), ContractError);
  CHECK_THROWS_AS(parse_run_config(R"({"prior": {"depht": 2}})"), ContractError);
  CHECK_THROWS_AS(parse_run_config(R"({"corpus": {"split": {"train": 0.8, "val": 0.1, "tset": 0.1}}})"),
                  ContractError);
  CHECK_THROWS_AS(parse_run_config(R"({"prior": {"vocab": 32}})"), ContractError);
  CHECK_THROWS_AS(parse_run_config(R"({"tokenizer": {"schedule": [1, 2, 4]}})"), ContractError);
  CHECK_THROWS_AS(parse_run_config(R"({"corpus": {"num_labels": 3}})"), ContractError);
  CHECK_THROWS_AS(parse_run_config(R"({"sampling": {"top_p": 0}})"), ContractError);
  CHECK_THROWS_AS(parse_run_config(R"({"prior_train": {"steps": "many"}})"), ContractError);
  CHECK_THROWS_AS(parse_run_config("{"), ContractError);
  CHECK_NOTHROW(parse_run_config(R"({"corpus": {"num_labels": 3}, "prior": {"num_labels": 3}})"));
}
