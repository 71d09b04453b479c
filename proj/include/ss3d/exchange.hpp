// SPDX-License-Identifier: Apache-2.0
//
// File-exchange adapter for out-of-process detectors (protocol version 1).
//
//   request   req_<uuid>.json   {protocol_version, scene_file, classes, score_threshold, nms}
//   scene     <uuid>.s3dm       native scene format, written before the request
//   response  resp_<uuid>.json  {protocol_version, detections:[{x,y,z,l,w,h,yaw,class,score}]}
//                               or {error}
//
// The responder deletes the request after writing the response. The client
// polls every 50 ms and removes the response and scene files once parsed.
#pragma once

#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <mutex>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "ss3d/dataio.hpp"
#include "ss3d/detector.hpp"

namespace ss3d {

inline constexpr int kExchangeProtocolVersion = 1;
inline constexpr std::chrono::milliseconds kExchangePollInterval{50};

namespace detail {

inline std::string random_uuid() {
  static std::mutex mutex;
  static Rng rng([] {
    std::random_device rd;
    return (static_cast<std::uint64_t>(rd()) << 32) ^ rd() ^
           static_cast<std::uint64_t>(std::chrono::steady_clock::now().time_since_epoch().count());
  }());
  std::lock_guard lock(mutex);
  const std::uint64_t hi = rng.next_u64(), lo = rng.next_u64();
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%08x-%04x-%04x-%04x-%012llx", static_cast<unsigned>(hi >> 32),
                static_cast<unsigned>((hi >> 16) & 0xffff), static_cast<unsigned>(hi & 0xffff),
                static_cast<unsigned>(lo >> 48), static_cast<unsigned long long>(lo & 0xffffffffffffull));
  return buf;
}

inline void write_atomically(const std::filesystem::path& path, std::string_view text) {
  auto tmp = path;
  tmp += ".tmp";
  write_text_file(tmp, text);
  std::filesystem::rename(tmp, path);
}

inline double require_number(const nlohmann::json& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end() || !it->is_number()) {
    throw Error(ErrorCode::ProtocolViolation, std::string("detection field '") + key + "' missing or not a number");
  }
  const double v = it->get<double>();
  if (!std::isfinite(v)) throw Error(ErrorCode::ProtocolViolation, std::string("detection field '") + key + "' not finite");
  return v;
}

}  // namespace detail

/// Parses and validates a JSON array of {x,y,z,l,w,h,yaw,class,score}.
inline std::vector<Detection> detections_from_json(const nlohmann::json& arr) {
  if (!arr.is_array()) throw Error(ErrorCode::ProtocolViolation, "detections must be an array");
  std::vector<Detection> out;
  for (const auto& d : arr) {
    if (!d.is_object()) throw Error(ErrorCode::ProtocolViolation, "detection is not an object");
    Detection det;
    det.box = {detail::require_number(d, "x"), detail::require_number(d, "y"), detail::require_number(d, "z"),
               detail::require_number(d, "l"), detail::require_number(d, "w"), detail::require_number(d, "h"),
               detail::require_number(d, "yaw")};
    if (!det.box.valid()) throw Error(ErrorCode::ProtocolViolation, "non-positive box dimensions");
    det.box.yaw = normalize_angle(det.box.yaw);
    auto cls = d.find("class");
    if (cls == d.end() || !cls->is_string() || !parse_class(cls->get<std::string>())) {
      throw Error(ErrorCode::ProtocolViolation, "unknown or missing class");
    }
    det.class_id = *parse_class(cls->get<std::string>());
    det.score = detail::require_number(d, "score");
    if (det.score < 0.0 || det.score > 1.0) throw Error(ErrorCode::ProtocolViolation, "score outside [0,1]");
    out.push_back(det);
  }
  return out;
}

/// Validates a parsed response document and extracts its detections.
inline std::vector<Detection> parse_exchange_response(const nlohmann::json& doc) {
  if (!doc.is_object()) throw Error(ErrorCode::ProtocolViolation, "response is not a JSON object");
  if (auto err = doc.find("error"); err != doc.end()) {
    throw Error(ErrorCode::ResponderError, err->is_string() ? err->get<std::string>() : err->dump());
  }
  auto ver = doc.find("protocol_version");
  if (ver == doc.end() || !ver->is_number_integer() || ver->get<int>() != kExchangeProtocolVersion) {
    throw Error(ErrorCode::ProtocolViolation, "missing or unsupported protocol_version");
  }
  auto dets = doc.find("detections");
  if (dets == doc.end()) throw Error(ErrorCode::ProtocolViolation, "detections array missing");
  return detections_from_json(*dets);
}

inline nlohmann::json detection_to_json(const Detection& d) {
  return {{"x", d.box.x}, {"y", d.box.y}, {"z", d.box.z},   {"l", d.box.l},
          {"w", d.box.w}, {"h", d.box.h}, {"yaw", d.box.yaw}, {"class", std::string(class_name(d.class_id))},
          {"score", d.score}};
}

/// Sends one scene to the responder watching `workdir` and waits for its
/// detections. Only one request may be in flight per workdir.
inline std::vector<Detection> external_exchange(const std::filesystem::path& workdir, const Scene& scene,
                                                const InferOptions& opts, std::chrono::milliseconds timeout) {
  namespace fs = std::filesystem;
  const std::string uuid = detail::random_uuid();
  const fs::path scene_path = workdir / (uuid + ".s3dm");
  const fs::path req_path = workdir / ("req_" + uuid + ".json");
  const fs::path resp_path = workdir / ("resp_" + uuid + ".json");

  Scene outgoing = scene;
  outgoing.clear_latent();
  write_file(scene_path, save_scene(outgoing));
  nlohmann::json classes = nlohmann::json::array();
  for (ClassId c : kAllClasses) classes.push_back(std::string(class_name(c)));
  const nlohmann::json req = {{"protocol_version", kExchangeProtocolVersion},
                              {"scene_file", scene_path.filename().string()},
                              {"classes", classes},
                              {"score_threshold", opts.score_threshold},
                              {"nms", opts.nms}};
  detail::write_atomically(req_path, req.dump());

  auto cleanup = [&] {
    std::error_code ec;
    fs::remove(scene_path, ec);
    fs::remove(resp_path, ec);
  };
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  int unparsable = 0;
  for (;;) {
    if (fs::exists(resp_path)) {
      nlohmann::json doc = nlohmann::json::parse(read_text_file(resp_path), nullptr, false);
      if (!doc.is_discarded()) {
        try {
          auto dets = parse_exchange_response(doc);
          cleanup();
          return dets;
        } catch (...) {
          cleanup();
          throw;
        }
      }
      // Possibly caught mid-write; give the responder a few more polls.
      if (++unparsable > 3) {
        cleanup();
        throw Error(ErrorCode::ProtocolViolation, "response is not valid JSON");
      }
    }
    if (std::chrono::steady_clock::now() >= deadline) {
      std::error_code ec;
      fs::remove(req_path, ec);
      cleanup();
      throw Error(ErrorCode::Timeout, "no response for request " + uuid);
    }
    std::this_thread::sleep_for(kExchangePollInterval);
  }
}

}  // namespace ss3d
