#pragma once

// Process-wide log of files opened for reading by the library. Used to verify
// that inference never touches event data.

#include <mutex>
#include <string>
#include <vector>

namespace pepr::audit {

struct Log {
  std::mutex mu;
  bool enabled = false;
  std::vector<std::string> paths;
};

inline Log& log() {
  static Log instance;
  return instance;
}

inline void record_open(const std::string& path) {
  auto& l = log();
  std::lock_guard lock(l.mu);
  if (l.enabled) l.paths.push_back(path);
}

inline void start() {
  auto& l = log();
  std::lock_guard lock(l.mu);
  l.enabled = true;
  l.paths.clear();
}

inline std::vector<std::string> stop() {
  auto& l = log();
  std::lock_guard lock(l.mu);
  l.enabled = false;
  return std::move(l.paths);
}

}  // namespace pepr::audit
