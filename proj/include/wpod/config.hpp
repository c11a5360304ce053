// Copyright 2026 The wpod-edge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Canonical text key/value files:
//
//   # comment
//   net.variant = edge_augmented
//   adam.learning_rate = 0.001
//
// One `key = value` pair per line. Keys are written back sorted, doubles with
// 17 significant digits so text round-trips are exact.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>

namespace wpod {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class KeyValueConfig {
 public:
  static KeyValueConfig parse(std::string_view text);
  static KeyValueConfig load(const std::filesystem::path& path);

  std::string to_text() const;

  bool contains(const std::string& key) const { return entries_.count(key) != 0; }
  void set(const std::string& key, std::string value) { entries_[key] = std::move(value); }
  void set(const std::string& key, double value);
  void set(const std::string& key, std::int64_t value);
  void set(const std::string& key, bool value);
  void set(const std::string& key, const char* value) { set(key, std::string(value)); }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;

  /// Entries whose key starts with `prefix`.
  KeyValueConfig subset(std::string_view prefix) const;
  void merge(const KeyValueConfig& other);

  const std::map<std::string, std::string>& entries() const { return entries_; }

 private:
  std::map<std::string, std::string> entries_;
};

std::string format_double(double v);

}  // namespace wpod
