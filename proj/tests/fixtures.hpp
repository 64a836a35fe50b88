#pragma once

#include "gama/compar.hpp"

#include <string>
#include <vector>

namespace gama::testing {

inline const std::vector<std::string>& event_labels() {
  static const std::vector<std::string> labels = {"Dog", "Speech", "Vehicle", "Bird", "Rain",
                                                  "Engine", "Footsteps", "Alarm", "Music", "Wind"};
  return labels;
}

// Deterministic metadata records with 2-4 events each; every third record
// misses its frame caption and place so the "unavailable" path is exercised.
inline std::vector<AudioMetadata> synthetic_metadata(std::size_t n) {
  const auto& labels = event_labels();
  static const std::vector<std::string> places = {"city street", "park", "kitchen", "train station", "forest"};
  std::vector<AudioMetadata> out;
  for (std::size_t i = 0; i < n; ++i) {
    AudioMetadata m;
    m.audio_id = "clip" + std::to_string(1000 + i);
    m.duration_s = 10.0;
    const std::size_t events = 2 + i % 3;
    for (std::size_t e = 0; e < events; ++e) {
      const auto& label = labels[(i * 3 + e * 7) % labels.size()];
      const Real start = static_cast<Real>((i + e * 3) % 6) + 0.5 * static_cast<Real>(e % 2);
      const Real len = 1.0 + static_cast<Real>((i + e) % 4);
      m.gt_events.push_back({label, start, start + len});
      m.audio_tags.push_back({label, 0.95 - 0.1 * static_cast<Real>(e), std::nullopt});
    }
    m.audio_caption = "A " + labels[(i * 3) % labels.size()] + " sound followed by " +
                      labels[(i * 3 + 7) % labels.size()] + " in the background";
    if (i % 3 != 0) {
      m.frame_caption = "a view of a " + places[i % places.size()];
      m.place_context = places[i % places.size()];
    }
    m.detected_objects = {"person", "tree"};
    if (i % 2 == 0) m.image_labels = {"outdoor"};
    out.push_back(std::move(m));
  }
  return out;
}

inline ExemplarPool instruction_pool(std::size_t n) {
  ExemplarPool pool;
  for (std::size_t i = 0; i < n; ++i) {
    pool.items.push_back({"Considering the sounds around second " + std::to_string(i % 10) +
                              ", what is most likely happening and why?",
                          "The overlap of the sounds suggests activity number " + std::to_string(i) +
                              ", because the events occur together."});
  }
  return pool;
}

inline ExemplarPool caption_pool(std::size_t n) {
  ExemplarPool pool;
  for (std::size_t i = 0; i < n; ++i) {
    pool.items.push_back({"a dog barks " + std::to_string(i) + " times", "Sharp barks ring out " + std::to_string(i) +
                                                                          " times across the yard"});
  }
  return pool;
}

}  // namespace gama::testing
