#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fyseg/detector.hpp"
#include "fyseg/pipeline.hpp"
#include "fyseg/segmenter.hpp"

namespace fyseg {

// Bad command line or config file content.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Merged view of built-in defaults, a `key = value` config file and
// `--key value` flag overrides, in that precedence order. Every key is
// validated against the known-key table; unknown keys are errors.
class RunConfig {
  public:
    RunConfig();

    // `# comment` lines and blank lines are ignored.
    void load_file(const std::string& path);
    void set(const std::string& key, const std::string& value);

    std::string get_string(const std::string& key) const;
    std::int64_t get_int(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;

    // Relative paths resolve against the workspace root.
    std::string get_path(const std::string& key) const;
    std::string workspace() const;

    // One "key = value" line per key, sorted; printed before every command.
    std::string resolved_text() const;

    static const std::vector<std::string>& known_keys();
    static std::string describe_keys();

    DetectorConfig detector_config() const;
    std::vector<BackboneStage> backbone_stages() const;
    SegConfig seg_config() const;
    SynthSpec synth_spec() const;

  private:
    std::map<std::string, std::string> values_;
};

}  // namespace fyseg
