/* Hangs detection challenge: the child never terminates, the parent
 * exits without waiting for it. */
#include "forkaware_rt.h"

int main(void) {
    fa_init();
    fa_probe(FA_ROOT_ENTRY);
    if (fork() == 0) { /* child process */
        fa_probe(FA_CHILD_ENTRY(1));
        while (1) {
            ;
        }
    }
    fa_probe(FA_PARENT_BRANCH);
    return 0;
}
