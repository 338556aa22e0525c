#include <doctest.h>

#include <cmath>
#include <fstream>
#include <limits>

#include "markvqa/trainer.hpp"
#include "support.hpp"

using namespace markvqa;

namespace {

TrainConfig tiny_config() {
    TrainConfig c;
    c.image_height = 112;
    c.image_width = 112;
    c.scene_token_count = 4;
    c.encoder.embed_dim = 16;
    c.encoder.depth = 1;
    c.encoder.heads = 2;
    c.encoder.lora_rank = 4;
    c.encoder.mlp_ratio = 2;
    c.decoder_embed_dim = 16;
    c.decoder_depth = 1;
    c.decoder_heads = 2;
    c.mlp_hidden = 32;
    c.batch_size = 2;
    c.total_iters = 10;
    c.seed = 5;
    return c;
}

std::vector<Scene> tiny_scenes(int n = 3) {
    SceneConfig sc = testing::small_config(112);
    sc.min_objects = 2;
    sc.max_objects = 3;
    std::vector<Scene> out;
    for (int i = 0; i < n; ++i) out.push_back(generate_scene(sc, static_cast<std::uint64_t>(40 + i)));
    return out;
}

template <typename T>
std::map<std::string, Mat<T>> snapshot(Model<T>& m) {
    std::map<std::string, Mat<T>> out;
    m.visit([&](Parameter<T>& p) { out[p.name] = p.value; });
    return out;
}

}  // namespace

TEST_CASE("config json round trip and validation") {
    TrainConfig c = tiny_config();
    c.use_instance_prompts = false;
    c.weight_decay = 0.05;
    const TrainConfig back = TrainConfig::from_json(nlohmann::json::parse(c.to_json().dump()));
    CHECK(back.to_json() == c.to_json());

    nlohmann::json j = c.to_json();
    j["learning_rate_typo"] = 1;
    CHECK_THROWS_AS(TrainConfig::from_json(j), ValidationError);
    j = c.to_json();
    j["encoder"]["depthh"] = 1;
    CHECK_THROWS_AS(TrainConfig::from_json(j), ValidationError);
    CHECK_THROWS_AS(TrainConfig::from_json(nlohmann::json{{"batch_size", "four"}}), ValidationError);
    CHECK(TrainConfig::from_json(nlohmann::json::object()).to_json() == TrainConfig{}.to_json());

    TrainConfig bad = tiny_config();
    bad.use_markers = false;
    bad.use_mcnet = true;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = tiny_config();
    bad.scene_token_count = 3;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = tiny_config();
    bad.image_height = 100;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    CHECK_THROWS_AS(TrainConfig::load("/nonexistent/config.json"), ValidationError);
}

TEST_CASE("cosine schedule") {
    CHECK(cosine_lr(5e-4, 0, 2000) == doctest::Approx(5e-4));
    CHECK(cosine_lr(5e-4, 1000, 2000) == doctest::Approx(2.5e-4));
    CHECK(cosine_lr(5e-4, 2000, 2000) <= 1e-8);
    double prev = 1;
    for (long t = 0; t <= 100; ++t) {
        const double lr = cosine_lr(1.0, t, 100);
        CHECK(lr <= prev);
        prev = lr;
    }
}

TEST_CASE("markerize rewrites coordinate spans") {
    MarkerIndexMap map;
    map = assign_query_coordinate(map, {100, 100}).second;
    CHECK(markerize("is there an object near (110.0,100.0)?", {{110, 100}}, map, 448, 448) ==
          "is there an object near <m1>?");
    CHECK(map.size() == 1);
    CHECK(markerize("where is (400.0,400.0)?", {}, map, 448, 448) == "where is <m2>?");
    CHECK(map.size() == 2);
    CHECK(markerize("plain text", {}, map, 448, 448) == "plain text");
    CHECK_THROWS_AS(markerize("at (900.0,10.0)", {}, map, 448, 448), ValidationError);
}

TEST_CASE("ablation variants differ only in their switches") {
    const Vocab vocab = vocab_for(tiny_scenes());
    TrainConfig c = tiny_config();
    auto full = ablation_variant<float>(c, vocab);
    c.use_mcnet = false;
    auto no_net = ablation_variant<float>(c, vocab);
    std::size_t full_n = 0, no_net_n = 0;
    for (auto* p : full.trainable()) {
        (void)p;
        ++full_n;
    }
    for (auto* p : no_net.trainable()) {
        CHECK(p->name.rfind("enc.ctrl", 0) != 0);
        ++no_net_n;
    }
    CHECK(no_net_n < full_n);
    // same seeds give the same weights regardless of switches
    const auto a = snapshot(full), b = snapshot(no_net);
    CHECK(a == b);
    for (auto* p : full.trainable()) {
        const bool expected = p->name.find("lora") != std::string::npos || p->name.rfind("enc.zero", 0) == 0 ||
                              p->name.rfind("mlp.", 0) == 0;
        CAPTURE(p->name);
        CHECK(expected);
    }
}

TEST_CASE("prepared scenes") {
    const auto scenes = tiny_scenes(1);
    const Vocab vocab = vocab_for(scenes);
    TrainConfig c = tiny_config();
    auto m = ablation_variant<float>(c, vocab);
    const auto prep = prepare_scene(m, scenes[0]);
    CHECK(prep.question_ids.size() == scenes[0].qa.size());
    CHECK(prep.marker_images.size() == scenes[0].images.size());
    CHECK(prep.map.detection_count() == scenes[0].detections.size());
    // coordinates become marker tokens
    for (const auto& ids : prep.answer_ids) {
        for (int id : ids) CHECK(vocab.token(id) != "(");
    }

    c.use_markers = false;
    c.use_mcnet = false;
    auto plain = ablation_variant<float>(c, vocab);
    const auto text = prepare_scene(plain, scenes[0]);
    CHECK(text.marker_images[0] == scenes[0].images[0]);
    bool saw_paren = false;
    for (const auto& ids : text.answer_ids) {
        for (int id : ids) saw_paren |= vocab.token(id) == "(";
    }
    CHECK(saw_paren);

    TrainConfig big = tiny_config();
    big.image_height = big.image_width = 224;
    auto wrong = ablation_variant<float>(big, vocab);
    CHECK_THROWS_AS(prepare_scene(wrong, scenes[0]), ValidationError);
}

TEST_CASE("zero iterations leave the model at initialization") {
    const auto scenes = tiny_scenes();
    const Vocab vocab = vocab_for(scenes);
    TrainConfig c = tiny_config();
    c.total_iters = 0;
    auto m = ablation_variant<float>(c, vocab);
    const auto before = snapshot(m);
    const auto r = train(m, scenes);
    CHECK(r.curve.empty());
    CHECK(snapshot(m) == before);
}

TEST_CASE("training touches exactly the trainable set") {
    const auto scenes = tiny_scenes();
    const Vocab vocab = vocab_for(scenes);
    TrainConfig c = tiny_config();
    c.total_iters = 10;
    auto m = ablation_variant<float>(c, vocab);
    const auto before = snapshot(m);
    const auto r = train(m, scenes);
    REQUIRE(r.curve.size() == 10);
    for (const auto& pt : r.curve) CHECK(std::isfinite(pt.loss));
    std::size_t frozen = 0, trainable = 0;
    m.visit([&](Parameter<float>& p) {
        CAPTURE(p.name);
        const Mat<float>& old = before.at(p.name);
        if (p.trainable) {
            CHECK((p.value.array() != old.array()).any());
            ++trainable;
        } else {
            // bit-identical
            CHECK(std::memcmp(p.value.data(), old.data(), sizeof(float) * static_cast<std::size_t>(old.size())) == 0);
            ++frozen;
        }
    });
    CHECK(frozen > 0);
    CHECK(trainable > 0);
}

TEST_CASE("a single step leaves zero-initialised adapters of an unused branch at zero") {
    // the zero linear hides the control branch at step 1, so its adapter up-projections
    // receive no gradient and, being zero, are unaffected by weight decay
    const auto scenes = tiny_scenes();
    const Vocab vocab = vocab_for(scenes);
    TrainConfig c = tiny_config();
    c.total_iters = 1;
    auto m = ablation_variant<float>(c, vocab);
    const auto before = snapshot(m);
    train(m, scenes);
    m.visit([&](Parameter<float>& p) {
        if (!p.trainable) return;
        CAPTURE(p.name);
        const bool ctrl_up = p.name.rfind("enc.ctrl", 0) == 0 && p.name.size() > 3 &&
                             p.name.compare(p.name.size() - 3, 3, ".up") == 0;
        if (ctrl_up) {
            CHECK(p.value.isZero(0));
        } else {
            CHECK((p.value.array() != before.at(p.name).array()).any());
        }
    });
}

TEST_CASE("training is deterministic") {
    const auto scenes = tiny_scenes();
    const Vocab vocab = vocab_for(scenes);
    TrainConfig c = tiny_config();
    c.total_iters = 4;
    auto a = ablation_variant<float>(c, vocab);
    auto b = ablation_variant<float>(c, vocab);
    const auto ra = train(a, scenes);
    const auto rb = train(b, scenes);
    for (std::size_t i = 0; i < ra.curve.size(); ++i) CHECK(ra.curve[i].loss == rb.curve[i].loss);
    CHECK(snapshot(a) == snapshot(b));
}

TEST_CASE("non-finite values abort with the iteration") {
    const auto scenes = tiny_scenes();
    const Vocab vocab = vocab_for(scenes);
    auto m = ablation_variant<float>(tiny_config(), vocab);
    m.trainable().front()->value(0, 0) = std::numeric_limits<float>::quiet_NaN();
    try {
        train(m, scenes);
        FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
        CHECK(e.iteration() == 0);
    }
}

TEST_CASE("checkpoint round trip") {
    const auto scenes = tiny_scenes();
    const Vocab vocab = vocab_for(scenes);
    TrainConfig c = tiny_config();
    c.total_iters = 3;
    auto m = ablation_variant<float>(c, vocab);
    const auto r = train(m, scenes);
    const auto dir = testing::temp_dir("ckpt");
    save_checkpoint(dir / "c.bin", m, r.optimizer, 3);
    auto loaded = load_checkpoint(dir / "c.bin");
    CHECK(loaded.iteration == 3);
    CHECK(loaded.optimizer.step == r.optimizer.step);
    CHECK(loaded.optimizer.m == r.optimizer.m);
    CHECK(loaded.optimizer.v == r.optimizer.v);
    CHECK(loaded.model.vocab == vocab);
    CHECK(loaded.model.config.to_json() == c.to_json());
    CHECK(snapshot(loaded.model) == snapshot(m));
    for (const auto& s : scenes) {
        const auto pa = prepare_scene(m, s);
        const auto pb = prepare_scene(loaded.model, s);
        CHECK(scene_loss(m, pa, false) == scene_loss(loaded.model, pb, false));
    }
    const auto ga = generate_answers(m, scenes);
    const auto gb = generate_answers(loaded.model, scenes);
    REQUIRE(ga.size() == gb.size());
    for (std::size_t i = 0; i < ga.size(); ++i) CHECK(ga[i].text == gb[i].text);

    // truncated and foreign files are rejected
    {
        std::ifstream in(dir / "c.bin", std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), {});
        std::ofstream(dir / "short.bin", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
        std::ofstream(dir / "junk.bin", std::ios::binary) << "not a checkpoint at all";
    }
    CHECK_THROWS_AS(load_checkpoint(dir / "short.bin"), ValidationError);
    CHECK_THROWS_AS(load_checkpoint(dir / "junk.bin"), ValidationError);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.bin"), ValidationError);
}

TEST_CASE("generation records cover every question") {
    const auto scenes = tiny_scenes(2);
    const Vocab vocab = vocab_for(scenes);
    TrainConfig c = tiny_config();
    c.max_new_tokens = 6;
    auto m = ablation_variant<float>(c, vocab);
    const auto recs = generate_answers(m, scenes);
    std::size_t n = 0;
    for (const auto& s : scenes) n += s.qa.size();
    CHECK(recs.size() == n);
    const auto report = evaluate_run(recs, scenes);
    CHECK(report.evaluated == n);
}

TEST_CASE("loss csv") {
    const auto dir = testing::temp_dir("csv");
    write_loss_csv(dir / "loss.csv", {{0, 5e-4, 2.5}, {1, 4e-4, 2.25}});
    std::ifstream in(dir / "loss.csv");
    std::string line;
    std::getline(in, line);
    CHECK(line == "iteration,lr,loss");
    std::getline(in, line);
    CHECK(line == "0,0.0005,2.5");
}
