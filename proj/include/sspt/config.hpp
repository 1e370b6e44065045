#pragma once

// Flat `key = value` experiment configuration. Every key has a default;
// repeating a key makes a list, which only grid search accepts.

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace sspt::cli {

/// Bad invocation or config text; maps to exit code 1.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class KeyKind { String, Path, Int, Real, Bool, Choice };

struct KeySpec {
  const char* name;
  KeyKind kind;
  const char* fallback;  // default, as config text
  const char* doc;
  const char* choices = "";  // '|'-separated for Choice
  bool list = false;         // inherently multi-valued
};

/// Every recognised key in echo order.
const std::vector<KeySpec>& schema();
const KeySpec& key_spec(const std::string& key);

class Config {
 public:
  /// Defaults only.
  Config();

  /// Parses config text; `origin` names the source in error messages.
  static Config parse(const std::string& text, const std::string& origin = "config");
  static Config load(const std::filesystem::path& file);

  /// Replaces every value of `key`. Values are type-checked.
  void set(const std::string& key, std::vector<std::string> values);
  /// `key=value` form; repeated overrides of one key accumulate into a list.
  void apply_overrides(const std::vector<std::string>& assignments);

  const std::vector<std::string>& values(const std::string& key) const;
  bool is_list(const std::string& key) const { return values(key).size() > 1; }
  /// Keys holding several values that are not inherently lists.
  std::vector<std::string> grid_keys() const;

  std::string str(const std::string& key) const;
  std::filesystem::path path(const std::string& key) const;
  std::int64_t integer(const std::string& key) const;
  std::size_t count(const std::string& key) const;  // non-negative integer
  double real(const std::string& key) const;
  bool flag(const std::string& key) const;
  std::vector<double> reals(const std::string& key) const;

  /// Resolved text: one `key = value` line per value, schema order.
  std::string echo() const;

  /// Rejects list values outside grid search.
  void require_scalars() const;

  friend bool operator==(const Config&, const Config&) = default;

 private:
  const std::string& single(const std::string& key) const;
  std::map<std::string, std::vector<std::string>> values_;
};

/// Type check of one textual value; throws UsageError naming the key.
void check_value(const KeySpec& spec, const std::string& value);

}  // namespace sspt::cli
