// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <atomic>
#include <functional>
#include <mutex>
#include <thread>

#include "test_util.hpp"

using namespace ss3d;
using namespace ss3d::test;
using nlohmann::json;
using namespace std::chrono_literals;

namespace {

// In-process responder: answers every request file in the workdir with the
// text produced by `reply` (nullopt = stay silent).
class StubResponder {
 public:
  using Reply = std::function<std::optional<std::string>(const json& req, const Scene& scene)>;

  StubResponder(std::filesystem::path dir, Reply reply) : dir_(std::move(dir)), reply_(std::move(reply)) {
    thread_ = std::thread([this] { loop(); });
  }
  ~StubResponder() {
    stop_ = true;
    thread_.join();
  }
  int served() const { return served_; }
  std::vector<json> requests() const {
    std::lock_guard lock(mutex_);
    return requests_;
  }

 private:
  void loop() {
    namespace fs = std::filesystem;
    while (!stop_) {
      for (const auto& e : fs::directory_iterator(dir_)) {
        const std::string name = e.path().filename().string();
        if (name.rfind("req_", 0) != 0 || e.path().extension() != ".json") continue;
        const json req = json::parse(read_text_file(e.path()));
        const Scene scene = load_scene(read_file(dir_ / req.at("scene_file").get<std::string>()));
        {
          std::lock_guard lock(mutex_);
          requests_.push_back(req);
        }
        const auto text = reply_(req, scene);
        if (text) {
          const std::string uuid = name.substr(4, name.size() - 4 - 5);
          write_text_file(dir_ / ("resp_" + uuid + ".json"), *text);
          fs::remove(e.path());
          ++served_;
        } else {
          fs::rename(e.path(), dir_ / ("ignored_" + name));
        }
      }
      std::this_thread::sleep_for(5ms);
    }
  }

  std::filesystem::path dir_;
  Reply reply_;
  std::atomic<bool> stop_{false};
  std::atomic<int> served_{0};
  mutable std::mutex mutex_;
  std::vector<json> requests_;
  std::thread thread_;
};

std::optional<std::string> echo(const json&, const Scene& s) {
  json dets = json::array();
  for (const Annotation& a : s.annotations) dets.push_back(detection_to_json({a.box, a.class_id, 0.9}));
  return json{{"protocol_version", 1}, {"detections", dets}}.dump();
}

Scene sample_scene() {
  Scene s = synthesize_scene(SynthConfig{}, 0, 3);
  for (const LatentObject& o : s.latent_gt(LatentAccess::data_tools())) s.annotations.push_back(o.annotation);
  return s;
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::Io;
}

}  // namespace

TEST(Exchange, EchoRoundTripAndRequestShape) {
  TempDir dir("xchg");
  const Scene s = sample_scene();
  std::vector<Detection> got;
  {
    StubResponder responder(dir.path(), echo);
    got = external_exchange(dir.path(), s, {.score_threshold = 0.25, .nms = false}, 5000ms);
    const auto reqs = responder.requests();
    ASSERT_EQ(reqs.size(), 1u);
    const json& req = reqs[0];
    EXPECT_EQ(req["protocol_version"], 1);
    EXPECT_EQ(req["classes"], json({"Car", "Pedestrian", "Cyclist"}));
    EXPECT_DOUBLE_EQ(req["score_threshold"].get<double>(), 0.25);
    EXPECT_EQ(req["nms"], false);
  }
  ASSERT_EQ(got.size(), s.annotations.size());
  for (std::size_t i = 0; i < got.size(); ++i) {
    EXPECT_EQ(got[i].box, s.annotations[i].box);
    EXPECT_EQ(got[i].class_id, s.annotations[i].class_id);
  }
  // Scene and response files are cleaned up; nothing is left behind.
  EXPECT_TRUE(std::filesystem::is_empty(dir.path()));
}

TEST(Exchange, LatentTruthNeverLeavesTheProcess) {
  TempDir dir("xchg");
  bool had_latent = true;
  StubResponder responder(dir.path(), [&](const json& req, const Scene& scene) {
    had_latent = scene.has_latent();
    return echo(req, scene);
  });
  external_exchange(dir.path(), sample_scene(), {}, 5000ms);
  EXPECT_FALSE(had_latent);
}

TEST(Exchange, OutOfRangeScoreIsProtocolViolation) {
  TempDir dir("xchg");
  StubResponder responder(dir.path(), [](const json&, const Scene&) {
    json d = detection_to_json({{0, 0, 0, 4, 2, 1.5, 0}, ClassId::Car, 0.5});
    d["score"] = 1.7;
    return std::optional<std::string>(json{{"protocol_version", 1}, {"detections", {d}}}.dump());
  });
  EXPECT_EQ(code_of([&] { external_exchange(dir.path(), sample_scene(), {}, 5000ms); }), ErrorCode::ProtocolViolation);
}

TEST(Exchange, SilentResponderTimesOut) {
  TempDir dir("xchg");
  StubResponder responder(dir.path(), [](const json&, const Scene&) { return std::optional<std::string>(); });
  const auto t0 = std::chrono::steady_clock::now();
  EXPECT_EQ(code_of([&] { external_exchange(dir.path(), sample_scene(), {}, 300ms); }), ErrorCode::Timeout);
  EXPECT_GE(std::chrono::steady_clock::now() - t0, 300ms);
}

TEST(Exchange, ErrorPayloadIsPropagated) {
  TempDir dir("xchg");
  StubResponder responder(dir.path(), [](const json&, const Scene&) {
    return std::optional<std::string>(R"({"error": "model not loaded"})");
  });
  try {
    external_exchange(dir.path(), sample_scene(), {}, 5000ms);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ResponderError);
    EXPECT_NE(std::string(e.what()).find("model not loaded"), std::string::npos);
  }
}

TEST(Exchange, GarbageResponseIsProtocolViolation) {
  TempDir dir("xchg");
  StubResponder responder(dir.path(), [](const json&, const Scene&) { return std::optional<std::string>("{not json"); });
  EXPECT_EQ(code_of([&] { external_exchange(dir.path(), sample_scene(), {}, 5000ms); }), ErrorCode::ProtocolViolation);
}

TEST(ResponseSchema, ValidationRules) {
  const json good = detection_to_json({{1, 2, 0.5, 4, 2, 1.5, 0.3}, ClassId::Cyclist, 0.4});
  EXPECT_EQ(parse_exchange_response({{"protocol_version", 1}, {"detections", {good}}}).size(), 1u);
  EXPECT_TRUE(parse_exchange_response({{"protocol_version", 1}, {"detections", json::array()}}).empty());
  auto violation = [](const json& doc) {
    return code_of([&] { parse_exchange_response(doc); }) == ErrorCode::ProtocolViolation;
  };
  EXPECT_TRUE(violation(json::array()));
  EXPECT_TRUE(violation({{"protocol_version", 2}, {"detections", json::array()}}));
  EXPECT_TRUE(violation({{"detections", json::array()}}));
  EXPECT_TRUE(violation({{"protocol_version", 1}}));
  EXPECT_TRUE(violation({{"protocol_version", 1}, {"detections", {1}}}));
  for (const char* key : {"x", "l", "yaw", "score", "class"}) {
    json bad = good;
    bad.erase(key);
    EXPECT_TRUE(violation({{"protocol_version", 1}, {"detections", {bad}}})) << key;
  }
  json neg = good;
  neg["w"] = -1.0;
  EXPECT_TRUE(violation({{"protocol_version", 1}, {"detections", {neg}}}));
  json van = good;
  van["class"] = "Van";
  EXPECT_TRUE(violation({{"protocol_version", 1}, {"detections", {van}}}));
  json text = good;
  text["x"] = "1.0";
  EXPECT_TRUE(violation({{"protocol_version", 1}, {"detections", {text}}}));
}

TEST(ResponseSchema, YawIsNormalized) {
  json d = detection_to_json({{1, 2, 0.5, 4, 2, 1.5, 0.0}, ClassId::Car, 0.4});
  d["yaw"] = 3 * kPi / 2;
  const auto dets = detections_from_json(json::array({d}));
  EXPECT_NEAR(dets[0].box.yaw, -kPi / 2, 1e-12);
}
