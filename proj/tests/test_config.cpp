#include <sstream>

#include "doctest.h"
#include "nucleiforge/config.hpp"

using namespace nf;

TEST_CASE("defaults") {
  const ExperimentConfig c;
  CHECK(c.train.epochs == 30);
  CHECK(c.train.lr == 2e-4);
  CHECK(c.train.decay == 0.98);
  CHECK(c.train.alpha == 1.0);
  CHECK(c.train.beta == 1.0);
  CHECK(c.align.lambda == 1.0);
  CHECK(c.align.mode == AlignMode::Cgrl);
  CHECK(c.model.freeze_base);
  CHECK(c.model.encoder.image_size == 64);
  CHECK(c.model.decoder.mode == DecoderMode::Hr);
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("parse sections, comments and overrides") {
  std::istringstream in(R"(
# comment
[model]
image_size = 32   ; trailing comment
[align]
mode = grl
lambda = 0.25
[decoder]
mode = base
[data]
auxiliary = aux1, aux3
[train]
epochs = 3
fine_on_primary_only = true
)");
  auto c = parse_config(in);
  CHECK(c.model.encoder.image_size == 32);
  CHECK(c.align.mode == AlignMode::Grl);
  CHECK(c.align.lambda == 0.25);
  CHECK(c.model.decoder.mode == DecoderMode::Base);
  CHECK(c.data.auxiliary_presets() == std::vector<std::string>{"aux1", "aux3"});
  CHECK(c.train.epochs == 3);
  CHECK(c.train.fine_on_primary_only);

  set_config_value(c, "train.epochs", "7");
  CHECK(c.train.epochs == 7);
  CHECK(get_config_value(c, "align.mode") == "grl");
  set_config_value(c, "data.auxiliary", "none");
  CHECK(c.data.auxiliary_presets().empty());
}

TEST_CASE("errors") {
  ExperimentConfig c;
  CHECK_THROWS_AS(set_config_value(c, "train.nope", "1"), std::invalid_argument);
  CHECK_THROWS_AS(set_config_value(c, "train.epochs", "three"), std::invalid_argument);
  CHECK_THROWS_AS(set_config_value(c, "align.mode", "dann"), std::invalid_argument);
  std::istringstream orphan("epochs = 3\n");
  CHECK_THROWS(parse_config(orphan));
  std::istringstream junk("[train]\nepochs\n");
  CHECK_THROWS(parse_config(junk));
  c.align.lambda = -1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK_THROWS(load_config("/nonexistent/config.ini"));
}

TEST_CASE("write and parse round trip every field") {
  ExperimentConfig c;
  c.train.lr = 1.2345678901234567e-3;
  c.align.mode = AlignMode::None;
  c.data.manifest = "data/manifest.tsv";
  c.model.decoder.mode = DecoderMode::Base;
  std::ostringstream out;
  write_config(out, c);
  std::istringstream in(out.str());
  const auto back = parse_config(in);
  for (const auto& f : config_fields()) CHECK_MESSAGE(f.get(back) == f.get(c), f.name);
}

TEST_CASE("warnings for ineffective combinations") {
  ExperimentConfig c;
  c.align.mode = AlignMode::None;
  CHECK_FALSE(config_warnings(c, {{"align.lambda", "0.5"}}).empty());
  CHECK(config_warnings(c, {{"train.epochs", "2"}}).empty());
  c.align.mode = AlignMode::Cgrl;
  c.data.auxiliary = "";
  CHECK_FALSE(config_warnings(c, {}).empty());
}
